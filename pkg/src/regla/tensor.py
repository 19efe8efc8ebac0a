"""Dense tensor primitives.

Tensors are plain ``numpy.ndarray`` values: row-major, images laid out as
``(channels, height, width)`` for a single sample. Every function here is pure
and returns a fresh array; inputs are never written to.

The default precision is float32. Pass float64 arrays to get 64-bit results
(the gradient checker relies on this).
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DimensionError

Tensor = np.ndarray

DEFAULT_DTYPE = np.float32

GELU_COEF = 0.044715
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

_recorders: list[list[tuple[int, ...]]] = []


@contextlib.contextmanager
def record_shapes() -> Iterator[list[tuple[int, ...]]]:
    """Collect the shape of every array produced by a primitive in this module.

    Used by the memory tests to assert structurally that no ``N x N`` buffer is
    ever created. Not thread safe; recording is meant for single-threaded probes.
    """
    shapes: list[tuple[int, ...]] = []
    _recorders.append(shapes)
    try:
        yield shapes
    finally:
        _recorders.remove(shapes)


def _emit(out: np.ndarray) -> np.ndarray:
    for rec in _recorders:
        rec.append(out.shape)
    return out


def tensor(data, dtype=None) -> Tensor:
    """Build a tensor, enforcing positive dimension sizes."""
    arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
    if arr.ndim == 0 or min(arr.shape) < 1:
        raise DimensionError(f"tensor dimensions must all be >= 1, got {arr.shape}")
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _emit(a @ b)


# --------------------------------------------------------------------------
# convolution


def _conv_geometry(x, weight, stride, padding, groups):
    if x.ndim != 3:
        raise DimensionError(f"conv2d expects a (C, H, W) input, got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d expects a 4-d weight, got {weight.shape}")
    c_in, h, w = x.shape
    c_out, cin_g, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigurationError(
            f"groups={groups} must divide C_in={c_in} and C_out={c_out}"
        )
    if cin_g != c_in // groups:
        raise ConfigurationError(
            f"weight expects {cin_g} channels per group, input provides {c_in // groups}"
        )
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"kernel must be square and odd-sized, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ConfigurationError(f"input {x.shape} too small for kernel {kh}")
    return c_in, c_out, kh, h_out, w_out


def _window(xp, i, j, stride, h_out, w_out):
    return xp[..., i : i + stride * (h_out - 1) + 1 : stride, j : j + stride * (w_out - 1) + 1 : stride]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``weight`` has shape ``(C_out, C_in // groups, k, k)``. Depthwise convolution
    is ``groups == C_in == C_out``; pointwise is ``k == 1``.
    """
    c_in, c_out, k, h_out, w_out = _conv_geometry(x, weight, stride, padding, groups)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    dtype = np.result_type(x, weight)

    if groups == c_in == c_out and weight.shape[1] == 1:
        out = np.zeros((c_in, h_out, w_out), dtype=dtype)
        for i in range(k):
            for j in range(k):
                out += weight[:, 0, i, j][:, None, None] * _window(xp, i, j, stride, h_out, w_out)
    else:
        cin_g, cout_g = c_in // groups, c_out // groups
        xg = xp.reshape(groups, cin_g, *xp.shape[1:])
        wg = weight.reshape(groups, cout_g, cin_g, k, k)
        out = np.zeros((groups, cout_g, h_out * w_out), dtype=dtype)
        for i in range(k):
            for j in range(k):
                patch = _window(xg, i, j, stride, h_out, w_out).reshape(groups, cin_g, -1)
                out += wg[:, :, :, i, j] @ patch
        out = out.reshape(c_out, h_out, w_out)
    if bias is not None:
        out += bias[:, None, None]
    return _emit(out)


def conv2d_backward(
    x: Tensor, weight: Tensor, grad_out: Tensor, stride: int = 1, padding: int = 0, groups: int = 1
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of :func:`conv2d` w.r.t. input, weight and bias."""
    c_in, c_out, k, h_out, w_out = _conv_geometry(x, weight, stride, padding, groups)
    _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    cin_g, cout_g = c_in // groups, c_out // groups
    xg = xp.reshape(groups, cin_g, *xp.shape[1:])
    wg = weight.reshape(groups, cout_g, cin_g, k, k)
    gy = grad_out.reshape(groups, cout_g, h_out * w_out)

    gxp = np.zeros(xg.shape, dtype=np.result_type(x, grad_out))
    gw = np.zeros(wg.shape, dtype=np.result_type(weight, grad_out))
    for i in range(k):
        for j in range(k):
            patch = _window(xg, i, j, stride, h_out, w_out).reshape(groups, cin_g, -1)
            gw[:, :, :, i, j] = gy @ patch.transpose(0, 2, 1)
            contrib = wg[:, :, :, i, j].transpose(0, 2, 1) @ gy
            _window(gxp, i, j, stride, h_out, w_out)[...] += contrib.reshape(groups, cin_g, h_out, w_out)
    gx = gxp.reshape(c_in, *xp.shape[1:])[:, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(gx), gw.reshape(weight.shape), grad_out.sum(axis=(1, 2))


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    return _emit(np.maximum(x, 0).astype(x.dtype, copy=False))


def sigmoid(x: Tensor) -> Tensor:
    return _emit(expit(x))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    inner = _SQRT_2_OVER_PI * (x + GELU_COEF * x**3)
    return _emit(0.5 * x * (1.0 + np.tanh(inner)))


def gelu_grad(x: Tensor) -> Tensor:
    inner = _SQRT_2_OVER_PI * (x + GELU_COEF * x**3)
    t = np.tanh(inner)
    d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    out = x - x.max(axis=1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)
    return _emit(out)


# --------------------------------------------------------------------------
# pooling and normalization


def _pool_bounds(size: int, out: int) -> np.ndarray:
    return (np.arange(out + 1) * size) // out


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average over disjoint windows tiling the spatial grid.

    Window ``i`` along an axis of length ``n`` covers ``[i*n//out, (i+1)*n//out)``.
    """
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"output size must be positive, got {out_h}x{out_w}")
    _, h, w = x.shape
    if out_h > h or out_w > w:
        raise ConfigurationError(f"cannot pool {h}x{w} up to {out_h}x{out_w}")
    bh, bw = _pool_bounds(h, out_h), _pool_bounds(w, out_w)
    sums = np.add.reduceat(np.add.reduceat(x, bh[:-1], axis=1), bw[:-1], axis=2)
    counts = np.outer(np.diff(bh), np.diff(bw)).astype(x.dtype)
    return _emit(sums / counts)


def adaptive_avg_pool_backward(grad_out: Tensor, in_shape: Sequence[int]) -> Tensor:
    _, h, w = in_shape
    _, out_h, out_w = grad_out.shape
    bh, bw = _pool_bounds(h, out_h), _pool_bounds(w, out_w)
    nh, nw = np.diff(bh), np.diff(bw)
    g = grad_out / np.outer(nh, nw).astype(grad_out.dtype)
    return np.repeat(np.repeat(g, nh, axis=1), nw, axis=2)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every pixel ``factor`` times along both spatial axes."""
    if factor < 1:
        raise ConfigurationError(f"upsample factor must be >= 1, got {factor}")
    return _emit(np.repeat(np.repeat(x, factor, axis=1), factor, axis=2))


def _along(v: Tensor, ndim: int, axis: int) -> Tensor:
    shape = [1] * ndim
    shape[axis] = -1
    return v.reshape(shape)


def batch_norm_infer(x: Tensor, scale, shift, mean, var, eps: float = 1e-5) -> Tensor:
    """Inference-mode batch norm over axis 0 (channels), folded to one affine map."""
    if np.any(np.asarray(var) < 0):
        raise ConfigurationError("batch_norm_infer: running variance must be >= 0")
    a = scale / np.sqrt(var + eps)
    b = shift - mean * a
    return _emit(x * _along(a, x.ndim, 0) + _along(b, x.ndim, 0))


def layer_norm(x: Tensor, axis: int = -1, gamma=None, beta=None, eps: float = 1e-6) -> Tensor:
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    out = xc / np.sqrt(var + eps)
    if gamma is not None:
        out = out * _along(gamma, x.ndim, axis)
    if beta is not None:
        out = out + _along(beta, x.ndim, axis)
    return _emit(out)


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return _emit(x.reshape(shape).copy())


def transpose_2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose_2d expects a matrix, got {x.shape}")
    return _emit(np.ascontiguousarray(x.T))


def flatten_spatial(x: Tensor) -> Tensor:
    """(C, H, W) -> (H*W, C); pixel (i, j) becomes row ``i*W + j``."""
    if x.ndim != 3:
        raise DimensionError(f"flatten_spatial expects (C, H, W), got {x.shape}")
    c = x.shape[0]
    return _emit(np.ascontiguousarray(x.reshape(c, -1).T))


def unflatten_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """Inverse of :func:`flatten_spatial`."""
    if x.ndim != 2 or x.shape[0] != height * width:
        raise DimensionError(f"cannot unflatten {x.shape} to a {height}x{width} grid")
    return _emit(np.ascontiguousarray(x.T.reshape(x.shape[1], height, width)))
