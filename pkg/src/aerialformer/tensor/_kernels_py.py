"""Pure-numpy im2col/col2im, used when the compiled core is unavailable.

Column layout (shared with the compiled core): ``cols[(c*k + i)*k + j, (n*oh + y)*ow + x]``
holds ``xp[n, c, y*stride + i*dilation, x*stride + j*dilation]`` of the
already-padded input ``xp``.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, k, stride, dilation, out_h, out_w):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(c, k, k, n, out_h, out_w),
        strides=(sc, sh * dilation, sw * dilation, sn, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(c * k * k, n * out_h * out_w)


def col2im(cols, n, c, hp, wp, k, stride, dilation, out_h, out_w):
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    blocks = cols.reshape(c, k, k, n, out_h, out_w)
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            y0, x0 = i * dilation, j * dilation
            out[:, :, y0:y0 + span_h:stride, x0:x0 + span_w:stride] += (
                blocks[:, i, j].transpose(1, 0, 2, 3))
    return out
