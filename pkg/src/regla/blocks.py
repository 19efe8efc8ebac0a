"""Convolutional building blocks and the attention block wrapper.

Each block is a pair: ``init_<block>(...)`` returns a dict of weights and
``<block>(x, w)`` applies it to a ``(C, H, W)`` map. Weight dicts may contain
autodiff ``Var`` handles. Keys ending in ``_mean`` / ``_var`` are batch-norm
running statistics, not learnable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, GateVariant, rgma_forward
from .errors import ConfigurationError
from .init import INIT_STD, ones, trunc_normal, zeros

BLOCK_KINDS = ("ELRF", "FFN", "MIB", "CPE", "Conv3Post", "Stem", "Downsample", "RGMABlock")
POST_ATTENTION_KINDS = ("Conv3", "FFN", "MIB")
EARLY_STAGE_KINDS = ("ELRF", "Conv7", "Conv9")
BUFFER_SUFFIXES = ("_mean", "_var")


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    channels_in: int
    channels_out: int
    expansion_ratio: float = 2.0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigurationError(f"unknown block kind {self.kind!r}")
        if self.channels_in < 1 or self.channels_out < 1 or self.expansion_ratio <= 0:
            raise ConfigurationError(f"invalid block spec {self}")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 2 and self.kind not in ("Stem", "Downsample"):
            raise ConfigurationError(f"{self.kind} blocks cannot be strided")
        if self.kind in ("ELRF", "CPE", "FFN", "MIB", "Conv3Post", "RGMABlock") and (
            self.channels_in != self.channels_out
        ):
            raise ConfigurationError(f"{self.kind} blocks preserve channel count")


def hidden_width(channels: int, ratio) -> int:
    hidden = Fraction(str(ratio)) * channels
    if hidden.denominator != 1 or hidden < 1:
        raise ConfigurationError(f"expansion {ratio} x {channels} channels is not a positive integer")
    return int(hidden)


def count_params(w: dict) -> int:
    """Learnable scalars in a (possibly nested) weight dict."""
    total = 0
    for k, v in w.items():
        if isinstance(v, dict):
            total += count_params(v)
        elif isinstance(v, list):
            total += sum(count_params(x) for x in v)
        elif not k.endswith(BUFFER_SUFFIXES):
            total += int(np.prod(np.shape(ad.value_of(v))))
    return total


def zeroed(w: dict) -> dict:
    """Copy of ``w`` with every learnable tensor set to zero."""
    return {k: (v if k.endswith(BUFFER_SUFFIXES) else np.zeros_like(v)) for k, v in w.items()}


def _dw(c, k, rng, dtype):
    return trunc_normal(rng, (c, 1, k, k), INIT_STD, dtype), zeros((c,), dtype)


def _pw(c_out, c_in, rng, dtype):
    return trunc_normal(rng, (c_out, c_in, 1, 1), INIT_STD, dtype), zeros((c_out,), dtype)


def _bn(prefix: str, c: int, dtype) -> dict:
    return {f"{prefix}_scale": ones((c,), dtype), f"{prefix}_shift": zeros((c,), dtype),
            f"{prefix}_mean": zeros((c,), dtype), f"{prefix}_var": ones((c,), dtype)}


def _apply_bn(x, w, prefix):
    return ad.batch_norm_infer(x, w[f"{prefix}_scale"], w[f"{prefix}_shift"],
                               ad.value_of(w[f"{prefix}_mean"]), ad.value_of(w[f"{prefix}_var"]))


def _depthwise(x, weight, bias):
    k = weight.shape[-1]
    return ad.conv2d(x, weight, bias, padding=k // 2, groups=x.shape[0])


# --------------------------------------------------------------------------
# FFN / MIB / CPE / Conv3 post-attention


def init_ffn(c: int, ratio=2, rng=None, dtype=np.float32) -> dict:
    rng = rng or np.random.default_rng(0)
    hc = hidden_width(c, ratio)
    w = {}
    w["pw1_w"], w["pw1_b"] = _pw(hc, c, rng, dtype)
    w["pw2_w"], w["pw2_b"] = _pw(c, hc, rng, dtype)
    return w


def ffn_block(x, w):
    """x + pw2(gelu(pw1(x)))."""
    h = ad.gelu(ad.conv2d(x, w["pw1_w"], w["pw1_b"]))
    return ad.add(x, ad.conv2d(h, w["pw2_w"], w["pw2_b"]))


def init_mib(c: int, ratio=2, rng=None, dtype=np.float32) -> dict:
    rng = rng or np.random.default_rng(0)
    hc = hidden_width(c, ratio)
    w = {}
    w["pw1_w"], w["pw1_b"] = _pw(hc, c, rng, dtype)
    w["dw_w"], w["dw_b"] = _dw(hc, 3, rng, dtype)
    w["pw2_w"], w["pw2_b"] = _pw(c, hc, rng, dtype)
    return w


def mib_block(x, w):
    """Inverted bottleneck: expand, GELU, depthwise 3x3, GELU, project, residual."""
    h = ad.gelu(ad.conv2d(x, w["pw1_w"], w["pw1_b"]))
    h = ad.gelu(_depthwise(h, w["dw_w"], w["dw_b"]))
    return ad.add(x, ad.conv2d(h, w["pw2_w"], w["pw2_b"]))


def init_cpe(c: int, rng=None, dtype=np.float32) -> dict:
    rng = rng or np.random.default_rng(0)
    w = {}
    w["dw_w"], w["dw_b"] = _dw(c, 3, rng, dtype)
    return w


def cpe_block(x, w):
    return ad.add(x, _depthwise(x, w["dw_w"], w["dw_b"]))


def init_conv3_post(c: int, rng=None, dtype=np.float32) -> dict:
    rng = rng or np.random.default_rng(0)
    w = {}
    w["dw_w"], w["dw_b"] = _dw(c, 3, rng, dtype)
    w["pw_w"], w["pw_b"] = _pw(c, c, rng, dtype)
    return w


def conv3_post(x, w):
    return ad.add(x, ad.conv2d(ad.gelu(_depthwise(x, w["dw_w"], w["dw_b"])), w["pw_w"], w["pw_b"]))


def init_post_attention(kind: str, c: int, ratio=2, rng=None, dtype=np.float32) -> dict:
    if kind == "Conv3":
        return init_conv3_post(c, rng, dtype)
    if kind == "FFN":
        return init_ffn(c, ratio, rng, dtype)
    if kind == "MIB":
        return init_mib(c, ratio, rng, dtype)
    raise ConfigurationError(f"unknown post-attention kind {kind!r}; expected one of {POST_ATTENTION_KINDS}")


def post_attention(x, w, kind: str = "Conv3"):
    if kind == "Conv3":
        return conv3_post(x, w)
    if kind == "FFN":
        return ffn_block(x, w)
    if kind == "MIB":
        return mib_block(x, w)
    raise ConfigurationError(f"unknown post-attention kind {kind!r}; expected one of {POST_ATTENTION_KINDS}")


# --------------------------------------------------------------------------
# early-stage blocks


def init_elrf(c: int, ratio=2, rng=None, dtype=np.float32) -> dict:
    rng = rng or np.random.default_rng(0)
    hc = hidden_width(c, ratio)
    w = {}
    w["dw3_w"], w["dw3_b"] = _dw(c, 3, rng, dtype)
    w["pw1_w"], w["pw1_b"] = _pw(hc, c, rng, dtype)
    w["dw5_w"], w["dw5_b"] = _dw(hc, 5, rng, dtype)
    w["pw2_w"], w["pw2_b"] = _pw(c, hc, rng, dtype)
    return w


def elrf_block(x, w):
    """Depthwise 3x3 with residual, then an FFN carrying a depthwise 5x5 inside.

    The non-residual response to a single pixel spans exactly 7x7 pixels
    (3x3 composed with 5x5).
    """
    if x.shape[0] != w["dw3_w"].shape[0]:
        raise ConfigurationError(f"ELRF weights built for {w['dw3_w'].shape[0]} channels, got {x.shape[0]}")
    y = ad.add(x, _depthwise(x, w["dw3_w"], w["dw3_b"]))
    h = ad.gelu(ad.conv2d(y, w["pw1_w"], w["pw1_b"]))
    h = ad.gelu(_depthwise(h, w["dw5_w"], w["dw5_b"]))
    return ad.add(y, ad.conv2d(h, w["pw2_w"], w["pw2_b"]))


def init_convk(c: int, k: int, ratio=2, rng=None, dtype=np.float32) -> dict:
    rng = rng or np.random.default_rng(0)
    w = {}
    w["dw_w"], w["dw_b"] = _dw(c, k, rng, dtype)
    w.update({f"ffn_{name}": v for name, v in init_ffn(c, ratio, rng, dtype).items()})
    return w


def convk_block(x, w):
    """Ablation baseline: one large depthwise kernel with residual, then an FFN."""
    y = ad.add(x, _depthwise(x, w["dw_w"], w["dw_b"]))
    return ffn_block(y, {k[4:]: v for k, v in w.items() if k.startswith("ffn_")})


def init_early_block(kind: str, c: int, ratio=2, rng=None, dtype=np.float32) -> dict:
    if kind == "ELRF":
        return init_elrf(c, ratio, rng, dtype)
    if kind in ("Conv7", "Conv9"):
        return init_convk(c, int(kind[4:]), ratio, rng, dtype)
    raise ConfigurationError(f"unknown early-stage kind {kind!r}; expected one of {EARLY_STAGE_KINDS}")


def early_block(x, w, kind: str = "ELRF"):
    return elrf_block(x, w) if kind == "ELRF" else convk_block(x, w)


# --------------------------------------------------------------------------
# stem and downsampling


def init_stem(c_out: int, c_in: int = 3, rng=None, dtype=np.float32) -> dict:
    rng = rng or np.random.default_rng(0)
    mid = max(c_out // 2, 1)
    w = {"conv1_w": trunc_normal(rng, (mid, c_in, 3, 3), INIT_STD, dtype), **_bn("bn1", mid, dtype),
         "conv2_w": trunc_normal(rng, (c_out, mid, 3, 3), INIT_STD, dtype), **_bn("bn2", c_out, dtype)}
    return w


def stem(x, w):
    """Two stride-2 3x3 convolutions (BN after each, GELU between): H x W -> H/4 x W/4."""
    _, h, wd = x.shape
    if h % 4 or wd % 4:
        raise ConfigurationError(f"stem needs spatial dims divisible by 4, got {h}x{wd}")
    y = ad.gelu(_apply_bn(ad.conv2d(x, w["conv1_w"], stride=2, padding=1), w, "bn1"))
    return _apply_bn(ad.conv2d(y, w["conv2_w"], stride=2, padding=1), w, "bn2")


def init_downsample(c_in: int, c_out: int, rng=None, dtype=np.float32) -> dict:
    rng = rng or np.random.default_rng(0)
    return {"conv_w": trunc_normal(rng, (c_out, c_in, 3, 3), INIT_STD, dtype), **_bn("bn", c_out, dtype)}


def downsample(x, w):
    _, h, wd = x.shape
    if h % 2 or wd % 2:
        raise ConfigurationError(f"downsample needs even spatial dims, got {h}x{wd}")
    return _apply_bn(ad.conv2d(x, w["conv_w"], stride=2, padding=1), w, "bn")


# --------------------------------------------------------------------------
# attention stage block


def init_rgma_block(c: int, post_kind: str = "Conv3", ratio=2, rng=None, dtype=np.float32) -> dict:
    rng = rng or np.random.default_rng(0)
    return {
        "cpe": init_cpe(c, rng, dtype),
        "norm_gamma": ones((c,), dtype),
        "norm_beta": zeros((c,), dtype),
        "attn": AttentionParams.init(c, rng, dtype=dtype).to_dict(),
        "post": init_post_attention(post_kind, c, ratio, rng, dtype),
    }


def rgma_block(x, w, variant=GateVariant.GATE_FULL, post_kind: str = "Conv3", epsilon: float = 1e-6):
    """CPE, then x + RGMA(LayerNorm(x)), then the post-attention block."""
    x = cpe_block(x, w["cpe"])
    normed = ad.layer_norm(x, axis=0, gamma=w["norm_gamma"], beta=w["norm_beta"])
    x = ad.add(x, rgma_forward(normed, AttentionParams.from_dict(w["attn"], epsilon), variant))
    return post_attention(x, w["post"], post_kind)
