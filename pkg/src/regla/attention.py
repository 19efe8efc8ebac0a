"""Softmax attention, ReLU linear attention and the gated RGMA operator.

All functions are written against :mod:`regla.autodiff` ops, so they run
eagerly on arrays and record a tape when handed :class:`~regla.autodiff.Var`
arguments.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError
from .init import INIT_STD, trunc_normal, zeros

DEFAULT_EPSILON = 1e-6


class GateVariant(enum.Enum):
    """How the sigmoid gate is wired into RGMA."""

    NO_GATE = "none"
    GATE_DECOUPLED = "decoupled"  # value path computed from the raw input
    GATE_FULL = "full"  # value path computed from the gated input

    @classmethod
    def parse(cls, name: "str | GateVariant") -> "GateVariant":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ConfigurationError(f"unknown gate variant {name!r}; expected one of {choices}") from None


@dataclass
class AttentionParams:
    """Weights of one RGMA operator.

    ``w_q``, ``w_k``, ``w_v`` are 1x1 convolution weights of shape ``(d, d, 1, 1)``;
    ``w_g`` is a depthwise 3x3 gate kernel ``(d, 1, 3, 3)`` with bias ``b_g``.
    Fields may hold autodiff ``Var`` handles when differentiating w.r.t. weights.
    """

    w_q: object
    w_k: object
    w_v: object
    w_g: object
    b_g: object
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        d = self.d
        expected = {"w_q": (d, d, 1, 1), "w_k": (d, d, 1, 1), "w_v": (d, d, 1, 1),
                    "w_g": (d, 1, 3, 3), "b_g": (d,)}
        for name, shape in expected.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise ConfigurationError(f"{name} has shape {got}, expected {shape}")
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def d(self) -> int:
        return int(self.w_q.shape[0])

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, std: float = INIT_STD, dtype=np.float32):
        return cls(
            w_q=trunc_normal(rng, (d, d, 1, 1), std, dtype),
            w_k=trunc_normal(rng, (d, d, 1, 1), std, dtype),
            w_v=trunc_normal(rng, (d, d, 1, 1), std, dtype),
            w_g=trunc_normal(rng, (d, 1, 3, 3), std, dtype),
            b_g=zeros((d,), dtype),
        )

    @classmethod
    def from_dict(cls, w: dict, epsilon: float = DEFAULT_EPSILON) -> "AttentionParams":
        return cls(w["w_q"], w["w_k"], w["w_v"], w["w_g"], w["b_g"], epsilon)

    def to_dict(self) -> dict:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_g": self.w_g, "b_g": self.b_g}


def _check_qkv(q, k, v):
    if not (q.ndim == k.ndim == v.ndim == 2):
        raise DimensionError(f"expected (N, d) matrices, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape != k.shape or k.shape[0] != v.shape[0]:
        raise DimensionError(f"incompatible Q/K/V shapes {q.shape}, {k.shape}, {v.shape}")


def softmax_attention(q, k, v):
    """Quadratic reference: softmax(Q K^T / sqrt(d)) V."""
    _check_qkv(q, k, v)
    scale = 1.0 / math.sqrt(q.shape[1])
    if not any(isinstance(t, ad.Var) for t in (q, k, v)):
        # eager path keeps a single N x N buffer alive
        s = q @ k.T
        s *= scale
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        return s @ v
    scores = ad.mul(ad.matmul(q, ad.transpose_2d(k)), np.asarray(scale, dtype=ad.value_of(q).dtype))
    return ad.matmul(ad.softmax_rows(scores), v)


def softmax_attention_weights(q, k):
    """The row-stochastic N x N attention matrix (for tests only)."""
    scale = 1.0 / math.sqrt(q.shape[1])
    return ad.softmax_rows(ad.mul(ad.matmul(q, ad.transpose_2d(k)), scale))


def relu_linear_attention(q, k, v, epsilon: float = DEFAULT_EPSILON):
    """ReLU(Q) (ReLU(K)^T V) / max(ReLU(Q) (ReLU(K)^T 1), epsilon).

    Evaluated in factored order: the d x d summary and the d-vector key sum are
    formed first, then each query is applied once. Cost O(N d^2), memory O(N d);
    no N x N intermediate exists.
    """
    _check_qkv(q, k, v)
    qp = ad.relu(q)
    kp = ad.relu(k)
    kv = ad.matmul(ad.transpose_2d(kp), v)  # (d, d_v)
    ksum = ad.transpose_2d(ad.sum(kp, axis=0, keepdims=True))  # (d, 1)
    num = ad.matmul(qp, kv)
    den = ad.matmul(qp, ksum)  # (N, 1)
    return ad.div(num, ad.maximum(den, epsilon))


def naive_relu_linear_attention(q, k, v, epsilon: float = DEFAULT_EPSILON):
    """Unfactored O(N^2) form of :func:`relu_linear_attention`; used as its oracle."""
    _check_qkv(q, k, v)
    a = ad.matmul(ad.relu(q), ad.transpose_2d(ad.relu(k)))  # (N, N)
    rows = ad.sum(a, axis=1, keepdims=True)
    return ad.div(ad.matmul(a, v), ad.maximum(rows, epsilon))


def conv_gate(x, w_g, b_g):
    """Spatial sigmoid gate: sigmoid(depthwise3x3(x) + bias)."""
    c = x.shape[0]
    return ad.sigmoid(ad.conv2d(x, w_g, b_g, padding=1, groups=c))


def rgma_forward(x, params: AttentionParams, variant=GateVariant.GATE_FULL):
    """RGMA on a (C, H, W) feature map; returns the same shape."""
    variant = GateVariant.parse(variant)
    if x.ndim != 3:
        raise DimensionError(f"rgma_forward expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if params.d != c:
        raise ConfigurationError(f"attention params built for d={params.d}, input has C={c}")

    gate = None if variant is GateVariant.NO_GATE else conv_gate(x, params.w_g, params.b_g)
    v_in = ad.mul(gate, x) if variant is GateVariant.GATE_FULL else x

    q = ad.flatten_spatial(ad.conv2d(x, params.w_q))
    k = ad.flatten_spatial(ad.conv2d(x, params.w_k))
    v = ad.flatten_spatial(ad.conv2d(v_in, params.w_v))
    context = ad.unflatten_spatial(relu_linear_attention(q, k, v, params.epsilon), h, w)
    return context if gate is None else ad.mul(gate, context)
