"""Convolution gather/scatter kernels.

The compiled core is used when it imports; otherwise the numpy fallback.
Set ``AERIALFORMER_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("AERIALFORMER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass


def im2col(xp, k, stride, dilation, out_h, out_w):
    return _impl.im2col(np.ascontiguousarray(xp), k, stride, dilation, out_h, out_w)


def col2im(cols, n, c, hp, wp, k, stride, dilation, out_h, out_w):
    return _impl.col2im(np.ascontiguousarray(cols), n, c, hp, wp, k, stride, dilation,
                        out_h, out_w)
