"""Tape-based reverse-mode differentiation over the primitives in :mod:`regla.tensor`.

Every differentiable op in this module accepts either plain arrays or
:class:`Var` handles. With plain arrays it simply evaluates the primitive, so
layers written against these ops run eagerly at full speed; as soon as one
argument is a ``Var`` the call is recorded on that variable's tape.

    >>> tape = Tape()
    >>> x = tape.leaf(np.array([3.0]))
    >>> y = sum(x * x)
    >>> backward(tape, y)[x]
    array([6.])
"""

from __future__ import annotations

import builtins
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, EvaluationError

FD_STEP = 1e-5


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None


@dataclass
class Tape:
    """Ordered record of a single forward pass; rebuilt for every pass."""

    nodes: list[Node] = field(default_factory=list)

    def leaf(self, value, name: str | None = None) -> "Var":
        value = np.asarray(value)
        self.nodes.append(Node("leaf" if name is None else f"leaf:{name}", (), value))
        return Var(self, len(self.nodes) - 1)

    def record(self, op: str, inputs: Sequence["Var | None"], value, backward) -> "Var":
        idx = tuple(-1 if v is None else v.index for v in inputs)
        if builtins.max(idx, default=-1) >= len(self.nodes):
            raise ValueError("input node is not on this tape")
        self.nodes.append(Node(op, idx, np.asarray(value), backward))
        return Var(self, len(self.nodes) - 1)


class Var:
    """Handle to a value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    # identity is (tape, index) so handles rebuilt by backward() compare equal
    def __hash__(self):
        return hash((id(self.tape), self.index))

    def __eq__(self, other):
        return isinstance(other, Var) and other.tape is self.tape and other.index == self.index

    def __repr__(self):
        return f"Var(#{self.index}, op={self.tape.nodes[self.index].op}, shape={self.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)


def value_of(x):
    """Underlying array of a ``Var``; anything else is returned unchanged."""
    return x.value if isinstance(x, Var) else x


def _tape(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = a.tape
    return tape


def _vars(*args) -> list[Var | None]:
    return [a if isinstance(a, Var) else None for a in args]


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    tape = _tape(a, b)
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if tape is None:
        return out
    return tape.record("add", _vars(a, b), out,
                       lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))))


def sub(a, b):
    tape = _tape(a, b)
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if tape is None:
        return out
    return tape.record("sub", _vars(a, b), out,
                       lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(-g, np.shape(bv))))


def neg(a):
    return sub(0.0, a)


def mul(a, b):
    tape = _tape(a, b)
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if tape is None:
        return out
    return tape.record("mul", _vars(a, b), out,
                       lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))))


def div(a, b):
    tape = _tape(a, b)
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if tape is None:
        return out
    return tape.record(
        "div", _vars(a, b), out,
        lambda g: (_unbroadcast(g / bv, np.shape(av)), _unbroadcast(-g * out / bv, np.shape(bv))),
    )


def maximum(a, floor: float):
    """Elementwise ``max(a, floor)``; the gradient passes only where ``a > floor``."""
    av = value_of(a)
    out = np.maximum(av, floor).astype(av.dtype, copy=False)
    tape = _tape(a)
    if tape is None:
        return out
    return tape.record("maximum", [a], out, lambda g: (g * (av > floor),))


def sqrt(a):
    av = value_of(a)
    out = np.sqrt(av)
    tape = _tape(a)
    if tape is None:
        return out
    return tape.record("sqrt", [a], out, lambda g: (g * 0.5 / out,))


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    tape = _tape(a)
    if tape is None:
        return out
    return tape.record("exp", [a], out, lambda g: (g * out,))


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    tape = _tape(a)
    if tape is None:
        return out

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return tape.record("sum", [a], out, bw)


def mean(a, axis=None, keepdims: bool = False):
    av = value_of(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


# --------------------------------------------------------------------------
# primitives from regla.tensor


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = T.matmul(av, bv)
    tape = _tape(a, b)
    if tape is None:
        return out
    return tape.record("matmul", _vars(a, b), out, lambda g: (g @ bv.T, av.T @ g))


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1):
    xv, wv = value_of(x), value_of(weight)
    bv = None if bias is None else value_of(bias)
    out = T.conv2d(xv, wv, bv, stride=stride, padding=padding, groups=groups)
    tape = _tape(x, weight, bias)
    if tape is None:
        return out

    def bw(g):
        gx, gw, gb = T.conv2d_backward(xv, wv, g, stride=stride, padding=padding, groups=groups)
        return gx, gw, gb

    return tape.record("conv2d", _vars(x, weight, bias), out, bw)


def relu(x):
    xv = value_of(x)
    out = T.relu(xv)
    tape = _tape(x)
    if tape is None:
        return out
    # subgradient at exactly 0 is 0
    return tape.record("relu", [x], out, lambda g: (g * (xv > 0),))


def sigmoid(x):
    out = T.sigmoid(value_of(x))
    tape = _tape(x)
    if tape is None:
        return out
    return tape.record("sigmoid", [x], out, lambda g: (g * out * (1.0 - out),))


def gelu(x):
    xv = value_of(x)
    out = T.gelu(xv)
    tape = _tape(x)
    if tape is None:
        return out
    return tape.record("gelu", [x], out, lambda g: (g * T.gelu_grad(xv),))


def softmax_rows(x):
    out = T.softmax_rows(value_of(x))
    tape = _tape(x)
    if tape is None:
        return out
    return tape.record(
        "softmax_rows", [x], out,
        lambda g: (out * (g - (g * out).sum(axis=1, keepdims=True)),),
    )


def adaptive_avg_pool(x, out_h: int, out_w: int):
    xv = value_of(x)
    out = T.adaptive_avg_pool(xv, out_h, out_w)
    tape = _tape(x)
    if tape is None:
        return out
    return tape.record("adaptive_avg_pool", [x], out,
                       lambda g: (T.adaptive_avg_pool_backward(g, xv.shape),))


def upsample_nearest(x, factor: int):
    xv = value_of(x)
    out = T.upsample_nearest(xv, factor)
    tape = _tape(x)
    if tape is None:
        return out
    c, h, w = xv.shape

    def bw(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return tape.record("upsample_nearest", [x], out, bw)


def batch_norm_infer(x, scale, shift, mean, var, eps: float = 1e-5):
    """Inference batch norm; differentiable w.r.t. ``x``, ``scale`` and ``shift``."""
    xv, sv, bv = value_of(x), value_of(scale), value_of(shift)
    out = T.batch_norm_infer(xv, sv, bv, mean, var, eps)
    tape = _tape(x, scale, shift)
    if tape is None:
        return out
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean[:, None, None]) * inv[:, None, None]

    def bw(g):
        return (g * (sv * inv)[:, None, None], (g * xhat).sum(axis=(1, 2)), g.sum(axis=(1, 2)))

    return tape.record("batch_norm_infer", _vars(x, scale, shift), out, bw)


def layer_norm(x, axis: int = -1, gamma=None, beta=None, eps: float = 1e-6):
    xv = value_of(x)
    gv = None if gamma is None else value_of(gamma)
    bv = None if beta is None else value_of(beta)
    out = T.layer_norm(xv, axis, gv, bv, eps)
    tape = _tape(x, gamma, beta)
    if tape is None:
        return out
    ax = axis % xv.ndim
    n = xv.shape[ax]
    mu = xv.mean(axis=ax, keepdims=True)
    rstd = 1.0 / np.sqrt(((xv - mu) ** 2).mean(axis=ax, keepdims=True) + eps)
    xhat = (xv - mu) * rstd
    others = tuple(i for i in range(xv.ndim) if i != ax)

    def bw(g):
        gh = g if gv is None else g * T._along(gv, xv.ndim, ax)
        gx = rstd / n * (n * gh - gh.sum(axis=ax, keepdims=True)
                         - xhat * (gh * xhat).sum(axis=ax, keepdims=True))
        gg = None if gv is None else (g * xhat).sum(axis=others)
        gb = None if bv is None else g.sum(axis=others)
        return gx, gg, gb

    return tape.record("layer_norm", _vars(x, gamma, beta), out, bw)


def reshape(x, shape):
    xv = value_of(x)
    out = T.reshape(xv, shape)
    tape = _tape(x)
    if tape is None:
        return out
    return tape.record("reshape", [x], out, lambda g: (g.reshape(xv.shape),))


def transpose_2d(x):
    out = T.transpose_2d(value_of(x))
    tape = _tape(x)
    if tape is None:
        return out
    return tape.record("transpose_2d", [x], out, lambda g: (np.ascontiguousarray(g.T),))


def flatten_spatial(x):
    xv = value_of(x)
    out = T.flatten_spatial(xv)
    tape = _tape(x)
    if tape is None:
        return out
    _, h, w = xv.shape
    return tape.record("flatten_spatial", [x], out, lambda g: (T.unflatten_spatial(g, h, w),))


def unflatten_spatial(x, height: int, width: int):
    out = T.unflatten_spatial(value_of(x), height, width)
    tape = _tape(x)
    if tape is None:
        return out
    return tape.record("unflatten_spatial", [x], out, lambda g: (T.flatten_spatial(g),))


# --------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, output: Var, seed=None) -> dict[Var, np.ndarray]:
    """Propagate ``seed`` (default: ones) from ``output`` back to every leaf.

    Returns a mapping from each leaf ``Var`` on the tape to its gradient;
    leaves that do not influence ``output`` get zeros.
    """
    out_value = output.value
    if seed is None:
        seed = np.ones_like(out_value)
    seed = np.asarray(seed, dtype=out_value.dtype)
    if seed.shape != out_value.shape:
        raise DimensionError(f"seed shape {seed.shape} != output shape {out_value.shape}")

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[output.index] = seed
    for i in range(output.index, -1, -1):
        node = tape.nodes[i]
        g = grads[i]
        if g is None or node.backward is None:
            continue
        for src, gi in zip(node.inputs, node.backward(g)):
            if src < 0 or gi is None:
                continue
            grads[src] = gi if grads[src] is None else grads[src] + gi

    result = {}
    for i, node in enumerate(tape.nodes):
        if node.op.startswith("leaf"):
            g = grads[i]
            result[Var(tape, i)] = np.zeros_like(node.value) if g is None else g
    return result


def grad(f: Callable, *args) -> tuple[np.ndarray, list[np.ndarray]]:
    """Evaluate scalar ``f(*args)`` and its gradient w.r.t. every argument."""
    tape = Tape()
    leaves = [tape.leaf(np.asarray(a)) for a in args]
    out = f(*leaves)
    if not isinstance(out, Var):
        return np.asarray(out), [np.zeros_like(np.asarray(a)) for a in args]
    if out.value.size != 1:
        raise DimensionError(f"grad needs a scalar output, got shape {out.shape}")
    grads = backward(tape, out)
    return out.value, [grads[v] for v in leaves]


def finite_diff_check(
    f: Callable, x, h: float = FD_STEP, coords: Iterable[int] | None = None
) -> float:
    """Max relative error between the tape gradient and central differences.

    For each checked coordinate ``i`` the error is
    ``|g_tape[i] - g_fd[i]| / max(1, |g_fd[i]|)``. ``coords`` restricts the check
    to a subset of flat indices (all by default). Run it on float64 inputs.
    """
    x = np.array(x, dtype=np.float64)

    def scalar(v):
        val = float(np.asarray(value_of(f(v))).reshape(-1)[0])
        if not np.isfinite(val):
            raise EvaluationError(f"function returned non-finite value {val}")
        return val

    _, (g_tape,) = grad(f, x)
    flat = g_tape.reshape(-1)
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        g_fd = (scalar(xp.reshape(x.shape)) - scalar(xm.reshape(x.shape))) / (2 * h)
        err = abs(flat[i] - g_fd) / builtins.max(1.0, abs(g_fd))
        worst = builtins.max(worst, err)
    return worst
