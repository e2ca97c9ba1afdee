"""Neural-network operators on :class:`Tensor` with fused backward rules."""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy.special import erf

from ..errors import GeometryError, ShapeError, UninitializedStatsError
from . import kernels
from .tensor import Tensor, add_flops, as_tensor, linear, make_result  # noqa: F401

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_watch = threading.local()


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def record_relu_patterns():
    """Collect the packed on/off pattern of every ReLU evaluated in this thread.

    Used by finite-difference checks to detect steps that cross a kink.
    """
    prev = getattr(_watch, "patterns", None)
    _watch.patterns = []
    try:
        yield _watch.patterns
    finally:
        _watch.patterns = prev


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    patterns = getattr(_watch, "patterns", None)
    if patterns is not None:
        patterns.append(np.packbits(mask).tobytes())
    return make_result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based Gaussian CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make_result("gelu", x.data * cdf, (x,), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    add_flops(4 * x.size)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (x,), bwd)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {list(gamma.shape)} / beta {list(beta.shape)} "
                         f"do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return dx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return make_result("layer_norm", out, (x, gamma, beta), bwd)


def batch_norm(x, gamma, beta, running_mean: np.ndarray | None, running_var: np.ndarray | None,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of an ``[N, C, H, W]`` tensor.

    In training mode batch statistics over (N, H, W) are used and the running
    buffers (if given) are updated in place; the running variance uses the
    unbiased estimator. In inference mode the running buffers are required.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [N, C, H, W], got {list(x.shape)}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: parameters {list(gamma.shape)} for {c} channels")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    m = n * h * w

    if training:
        if m < 2:
            raise ShapeError(f"batch_norm training needs N*H*W >= 2, got {m}")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(c)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(c) * m / (m - 1)

        def bwd(g):
            dxhat = g * g4
            dx = inv * (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        if running_mean is None or running_var is None:
            raise UninitializedStatsError(
                "batch_norm in inference mode before any running statistics were recorded")
        inv = 1.0 / np.sqrt(running_var.reshape(1, c, 1, 1) + eps)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv

        def bwd(g):
            return g * g4 * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result("batch_norm", xhat * g4 + b4, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x``: [N, Cin, H, W], ``weight``: [Cout, Cin, k, k] -> [N, Cout, H', W'].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {list(x.shape)}, "
                         f"{list(weight.shape)}")
    n, cin, h, w = x.shape
    cout, wcin, k, k2 = weight.shape
    if wcin != cin or k != k2:
        raise ShapeError(f"conv2d: input {list(x.shape)} incompatible with weight "
                         f"{list(weight.shape)}")
    if k < 1 or stride < 1 or dilation < 1 or padding < 0:
        raise GeometryError(f"conv2d: invalid k={k}, stride={stride}, dilation={dilation}, "
                            f"padding={padding}")
    oh = conv_output_size(h, k, stride, padding, dilation)
    ow = conv_output_size(w, k, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise GeometryError(
            f"conv2d output size {oh}x{ow} < 1: floor((H + 2*{padding} - {dilation}*({k}-1) - 1)"
            f"/{stride}) + 1 with H, W = {h}, {w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    hp, wp = xp.shape[2:]
    cols = kernels.im2col(xp, k, stride, dilation, oh, ow)
    w2 = weight.data.reshape(cout, -1)
    add_flops(2 * cout * cols.shape[0] * cols.shape[1])
    out = (w2 @ cols).reshape(cout, n, oh, ow).transpose(1, 0, 2, 3)
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)
        inputs = (x, weight, bias)

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gxp = kernels.col2im(w2.T @ g2, n, cin, hp, wp, k, stride, dilation, oh, ow)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result("conv2d", np.ascontiguousarray(out), inputs, bwd)


def conv_transpose2d(x, weight, bias=None, stride: int = 2, padding: int = 0,
                     dilation: int = 1) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d` in its input.

    ``x``: [N, Cin, h, w], ``weight``: [Cin, Cout, k, k] ->
    [N, Cout, (h-1)*stride - 2*padding + dilation*(k-1) + 1, ...].
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and weight, got "
                         f"{list(x.shape)}, {list(weight.shape)}")
    n, cin, h, w = x.shape
    wcin, cout, k, k2 = weight.shape
    if wcin != cin or k != k2:
        raise ShapeError(f"conv_transpose2d: input {list(x.shape)} incompatible with weight "
                         f"{list(weight.shape)}")
    if k < 1 or stride < 1 or dilation < 1 or padding < 0:
        raise GeometryError(f"conv_transpose2d: invalid k={k}, stride={stride}, "
                            f"dilation={dilation}, padding={padding}")
    hp = (h - 1) * stride + dilation * (k - 1) + 1
    wp = (w - 1) * stride + dilation * (k - 1) + 1
    oh, ow = hp - 2 * padding, wp - 2 * padding
    if oh < 1 or ow < 1:
        raise GeometryError(f"conv_transpose2d output size {oh}x{ow} < 1 for input {h}x{w}, "
                            f"k={k}, stride={stride}, padding={padding}")
    w2 = weight.data.reshape(cin, cout * k * k)
    x2 = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(cin, -1)
    add_flops(2 * cin * w2.shape[1] * x2.shape[1])
    full = kernels.col2im(w2.T @ x2, n, cout, hp, wp, k, stride, dilation, h, w)
    out = full[:, :, padding:padding + oh, padding:padding + ow] if padding else full
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, cout, 1, 1)
        inputs = (x, weight, bias)

    def bwd(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
            if padding else g
        cols = kernels.im2col(gp, k, stride, dilation, h, w)
        gx = (w2 @ cols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        gw = (x2 @ cols.T).reshape(weight.shape)
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result("conv_transpose2d", np.ascontiguousarray(out), inputs, bwd)
