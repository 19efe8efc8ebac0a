"""Randomised verification suites: linear-attention equivalence and gradient checks."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from . import blocks as B
from .attention import (DEFAULT_EPSILON, AttentionParams, GateVariant, conv_gate,
                        naive_relu_linear_attention, relu_linear_attention, rgma_forward,
                        softmax_attention)
from .distill import TeacherFeatures, init_heads, multi_teacher_loss
from .model import ModelConfig, build, forward

EQUIV_TOL = 1e-5
GRAD_TOL = 1e-6
KINK_MARGIN = 1e-3
NEGATIVE_Q_EVERY = 25


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("REGLA_THREADS", "1")))
    except ValueError:
        return 1


def _ordered_map(fn, items):
    items = list(items)
    n = worker_count()
    if n == 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    """max |got - want| / max(1, |want|); NaN anywhere counts as infinite."""
    err = np.abs(got - want) / np.maximum(1.0, np.abs(want))
    if not np.all(np.isfinite(err)):
        return float("inf")
    return float(err.max())


# --------------------------------------------------------------------------
# factored vs naive linear attention


@dataclass
class EquivTrial:
    trial: int
    n: int
    d: int
    error: float
    negative_q: bool


@dataclass
class EquivReport:
    trials: list[EquivTrial]
    tolerance: float

    @property
    def worst(self) -> EquivTrial:
        return max(self.trials, key=lambda t: t.error)

    @property
    def failures(self) -> list[EquivTrial]:
        return [t for t in self.trials if not t.error <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures


def equivalence_trials(seed: int = 0, trials: int = 200, epsilon: float = DEFAULT_EPSILON,
                       dtype=np.float64, tolerance: float = EQUIV_TOL) -> EquivReport:
    """Compare :func:`relu_linear_attention` with its O(N^2) oracle on random shapes.

    Every ``NEGATIVE_Q_EVERY``-th trial (starting with trial 0) uses an
    all-negative Q, exercising the denominator floor.
    """
    rng = np.random.default_rng(seed)
    out = []
    for t in range(trials):
        n = int(rng.integers(1, 33))
        d = int(rng.integers(1, 17))
        q, k, v = (rng.standard_normal((n, d)) + 0.5 for _ in range(3))
        negative = t % NEGATIVE_Q_EVERY == 0
        if negative:
            q = -np.abs(q) - 0.1
        q, k, v = (a.astype(dtype) for a in (q, k, v))
        with np.errstate(invalid="ignore", divide="ignore"):
            fast = relu_linear_attention(q, k, v, epsilon)
            slow = naive_relu_linear_attention(q, k, v, epsilon)
        out.append(EquivTrial(t, n, d, relative_error(fast, slow), negative))
    return EquivReport(out, tolerance)


# --------------------------------------------------------------------------
# gradient checks

SCOPES = ("primitives", "attention", "blocks", "model", "distill")


@dataclass
class GradUnit:
    scope: str
    name: str
    # seed -> (f, x, coords); f maps an array or Var to a scalar
    make: Callable[[np.random.Generator], tuple]


@dataclass
class GradResult:
    scope: str
    unit: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= GRAD_TOL


def kink_free(rng, shape, scale=1.0, shift=0.0):
    """Standard-normal sample with every |coordinate| >= 1e-3."""
    x = rng.standard_normal(shape) * scale + shift
    while True:
        bad = np.abs(x) < KINK_MARGIN
        if not bad.any():
            return x
        x[bad] = rng.standard_normal(int(bad.sum())) * scale + shift


def _probe_loss(fn, out_shape, rng):
    """Scalar sum(fn(x) * R) with a fixed random R."""
    r = rng.standard_normal(out_shape)

    def f(x):
        return ad.sum(ad.mul(fn(x), r))

    return f


def _randomize(w, rng, std=0.4):
    """Replace every learnable tensor with N(0, std) values (float64)."""
    if isinstance(w, dict):
        return {k: (np.asarray(v, dtype=np.float64) if k.endswith(B.BUFFER_SUFFIXES)
                    else _randomize(v, rng, std)) for k, v in w.items()}
    if isinstance(w, list):
        return [_randomize(v, rng, std) for v in w]
    if w is None:
        return None
    return rng.standard_normal(np.shape(w)) * std


_UNITS: list[GradUnit] = []


def _fn_unit(scope, name, shape, fn, out_shape, scale=1.0, shift=0.0):
    def make(rng):
        x = kink_free(rng, shape, scale, shift)
        return _probe_loss(fn, out_shape, rng), x, None
    _UNITS.append(GradUnit(scope, name, make))


# primitives ----------------------------------------------------------------

def _register_primitives():
    const = np.random.default_rng(1234)
    b_mat = const.standard_normal((4, 3))
    a_mat = const.standard_normal((5, 4))
    w_dense = const.standard_normal((4, 3, 3, 3)) * 0.5
    w_group = const.standard_normal((4, 2, 3, 3)) * 0.5
    w_dw = const.standard_normal((4, 1, 3, 3)) * 0.5
    x_img = const.standard_normal((3, 6, 6))
    bn = [const.standard_normal(4), const.standard_normal(4), const.standard_normal(4), const.random(4) + 0.5]
    gamma, beta = const.standard_normal(4), const.standard_normal(4)

    _fn_unit("primitives", "matmul[a]", (5, 4), lambda a: ad.matmul(a, b_mat), (5, 3))
    _fn_unit("primitives", "matmul[b]", (4, 3), lambda b: ad.matmul(a_mat, b), (5, 3))
    _fn_unit("primitives", "conv2d[input]", (3, 6, 6),
             lambda x: ad.conv2d(x, w_dense, padding=1), (4, 6, 6))
    _fn_unit("primitives", "conv2d[weight]", (4, 3, 3, 3),
             lambda w: ad.conv2d(x_img, w, stride=2, padding=1), (4, 3, 3))
    _fn_unit("primitives", "conv2d[grouped]", (4, 5, 5),
             lambda x: ad.conv2d(x, w_group, padding=1, groups=2), (4, 5, 5))
    _fn_unit("primitives", "conv2d[depthwise,stride2]", (4, 7, 7),
             lambda x: ad.conv2d(x, w_dw, stride=2, padding=1, groups=4), (4, 4, 4))
    _fn_unit("primitives", "relu", (3, 4), ad.relu, (3, 4))
    _fn_unit("primitives", "sigmoid", (3, 4), ad.sigmoid, (3, 4))
    _fn_unit("primitives", "gelu", (3, 4), ad.gelu, (3, 4))
    _fn_unit("primitives", "softmax_rows", (3, 5), ad.softmax_rows, (3, 5))
    _fn_unit("primitives", "adaptive_avg_pool", (2, 5, 7), lambda x: ad.adaptive_avg_pool(x, 2, 3), (2, 2, 3))
    _fn_unit("primitives", "batch_norm_infer", (4, 3, 3), lambda x: ad.batch_norm_infer(x, *bn), (4, 3, 3))
    _fn_unit("primitives", "layer_norm", (4, 3, 3),
             lambda x: ad.layer_norm(x, axis=0, gamma=gamma, beta=beta), (4, 3, 3))
    _fn_unit("primitives", "flatten/unflatten", (3, 2, 4),
             lambda x: ad.unflatten_spatial(ad.mul(ad.flatten_spatial(x), ad.flatten_spatial(x)), 2, 4), (3, 2, 4))
    _fn_unit("primitives", "transpose/reshape", (3, 4),
             lambda x: ad.reshape(ad.transpose_2d(x), (2, 6)), (2, 6))
    _fn_unit("primitives", "upsample_nearest", (2, 3, 3), lambda x: ad.upsample_nearest(x, 2), (2, 6, 6))
    _fn_unit("primitives", "arithmetic", (3, 4),
             lambda x: ad.div(ad.sub(ad.mul(x, x), ad.exp(x)),
                              ad.sqrt(ad.add(ad.maximum(ad.mul(x, x), 0.5), 1.0))), (3, 4))


# attention -------------------------------------------------------------------

def _random_attention_params(rng, d, std=0.5):
    return AttentionParams(*(rng.standard_normal(s) * std for s in
                             [(d, d, 1, 1), (d, d, 1, 1), (d, d, 1, 1), (d, 1, 3, 3), (d,)]))


def _register_attention():
    def qkv_unit(name, which):
        def make(rng):
            n, d = 6, 4
            mats = [rng.standard_normal((n, d)) + 0.3 for _ in range(3)]
            x = kink_free(rng, (n, d), shift=0.3)

            def fn(arg):
                ops = list(mats)
                ops[which] = arg
                if name == "softmax_attention":
                    return softmax_attention(*ops)
                return relu_linear_attention(*ops)

            return _probe_loss(fn, (n, d), rng), x, None
        return make

    _UNITS.append(GradUnit("attention", "softmax_attention[Q]", qkv_unit("softmax_attention", 0)))
    for i, part in enumerate("QKV"):
        _UNITS.append(GradUnit("attention", f"relu_linear_attention[{part}]", qkv_unit("relu", i)))

    def gate_make(rng):
        w, b = rng.standard_normal((8, 1, 3, 3)) * 0.5, rng.standard_normal(8) * 0.5
        return _probe_loss(lambda x: conv_gate(x, w, b), (8, 4, 4), rng), kink_free(rng, (8, 4, 4)), None

    _UNITS.append(GradUnit("attention", "conv_gate", gate_make))

    for variant in GateVariant:
        def make(rng, variant=variant):
            params = _random_attention_params(rng, 8)
            x = kink_free(rng, (8, 4, 4))
            return _probe_loss(lambda a: rgma_forward(a, params, variant), (8, 4, 4), rng), x, None
        _UNITS.append(GradUnit("attention", f"rgma[{variant.value}]", make))

    def weight_make(rng):
        params = _random_attention_params(rng, 8)
        x = rng.standard_normal((8, 4, 4))

        def fn(w_v):
            p = AttentionParams(params.w_q, params.w_k, w_v, params.w_g, params.b_g)
            return rgma_forward(x, p, GateVariant.GATE_FULL)
        return _probe_loss(fn, (8, 4, 4), rng), params.w_v, None

    _UNITS.append(GradUnit("attention", "rgma[full, w_v]", weight_make))


# blocks --------------------------------------------------------------------

def _register_blocks():
    c = 4

    def block_unit(name, init, apply, in_shape, out_shape):
        def make(rng):
            w = _randomize(init(rng), rng)
            return _probe_loss(lambda x: apply(x, w), out_shape, rng), kink_free(rng, in_shape), None
        _UNITS.append(GradUnit("blocks", name, make))

    s = (c, 6, 6)
    block_unit("elrf", lambda r: B.init_elrf(c, 2, r), B.elrf_block, s, s)
    block_unit("ffn", lambda r: B.init_ffn(c, 2, r), B.ffn_block, s, s)
    block_unit("mib", lambda r: B.init_mib(c, 2, r), B.mib_block, s, s)
    block_unit("cpe", lambda r: B.init_cpe(c, r), B.cpe_block, s, s)
    for kind in B.POST_ATTENTION_KINDS:
        block_unit(f"post_attention[{kind}]", lambda r, k=kind: B.init_post_attention(k, c, 2, r),
                   lambda x, w, k=kind: B.post_attention(x, w, k), s, s)
    block_unit("conv7", lambda r: B.init_convk(c, 7, 2, r), B.convk_block, s, s)
    block_unit("stem", lambda r: B.init_stem(c, rng=r), B.stem, (3, 8, 8), (c, 2, 2))
    block_unit("downsample", lambda r: B.init_downsample(c, 2 * c, r), B.downsample, s, (2 * c, 3, 3))
    for variant in GateVariant:
        block_unit(f"rgma_block[{variant.value}]", lambda r: B.init_rgma_block(c, "Conv3", 2, r),
                   lambda x, w, v=variant: B.rgma_block(x, w, v), s, s)


# model -------------------------------------------------------------------------

TINY_CONFIG = ModelConfig(variant="tiny", blocks=(1, 1, 1, 1), channels=(4, 4, 8, 8),
                          num_classes=5, head_hidden_ratio=1.0)


def _register_model():
    def make(rng):
        model = build(TINY_CONFIG, seed=int(rng.integers(1 << 31)), dtype=np.float64)
        model.params = _randomize(model.params, rng, std=0.3)
        x = kink_free(rng, (3, 32, 32))
        coords = rng.choice(x.size, size=24, replace=False)
        return _probe_loss(lambda a: forward(model, a)[0], (TINY_CONFIG.num_classes,), rng), x, coords
    _UNITS.append(GradUnit("model", f"forward[{TINY_CONFIG.variant}]", make))


# distillation ------------------------------------------------------------------

def _register_distill():
    shapes = [(4, 8, 8), (6, 4, 4), (8, 2, 2)]

    def make_for(stage):
        def make(rng):
            feats = [rng.standard_normal(s) for s in shapes]
            teachers = [TeacherFeatures(f"t{i}", rng.standard_normal((16, 5)), rng.standard_normal(5))
                        for i in range(2)]
            heads = init_heads([s[0] for s in shapes], teachers, seed=int(rng.integers(1 << 31)))
            for h in heads.values():
                h.patch_w = [rng.standard_normal(w.shape) for w in h.patch_w]
                h.cls_w = [rng.standard_normal(w.shape) for w in h.cls_w]

            def f(x):
                fs = list(feats)
                fs[stage] = x
                return multi_teacher_loss(fs, teachers, heads, grid_hw=(4, 4)).total
            return f, kink_free(rng, shapes[stage]), None
        return make

    for stage, label in enumerate(["pooled", "aligned", "upsampled"]):
        _UNITS.append(GradUnit("distill", f"multi_teacher_loss[stage{stage + 1},{label}]", make_for(stage)))


_register_primitives()
_register_attention()
_register_blocks()
_register_model()
_register_distill()


def units(scope: str | None = None) -> list[GradUnit]:
    if scope is not None and scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    return [u for u in _UNITS if scope is None or u.scope == scope]


def check_unit(unit: GradUnit, seed: int) -> GradResult:
    rng = np.random.default_rng([seed, sum(map(ord, unit.name))])
    f, x, coords = unit.make(rng)
    return GradResult(unit.scope, unit.name, seed, ad.finite_diff_check(f, x, coords=coords))


def run_gradcheck(scope: str | None = None, seeds: Iterable[int] = (0,)) -> list[GradResult]:
    jobs = [(u, s) for u in units(scope) for s in seeds]
    return _ordered_map(lambda job: check_unit(*job), jobs)


# --------------------------------------------------------------------------
# receptive-field probes


def impulse_response(block: Callable, shape: tuple[int, int, int], channel: int, row: int, col: int,
                     amplitude: float = 1.0) -> np.ndarray:
    """Non-residual response of ``block`` to a single-pixel impulse.

    Returns ``block(x0 + e) - block(x0) - e`` for ``x0 = 0``, so constant bias
    contributions and the identity path both cancel.
    """
    base = np.zeros(shape)
    pulse = base.copy()
    pulse[channel, row, col] = amplitude
    return block(pulse) - block(base) - pulse


def support_box(response: np.ndarray) -> tuple[int, int, int, int] | None:
    """Bounding box ``(r0, r1, c0, c1)`` (inclusive) of the nonzero spatial positions."""
    mask = np.any(response != 0, axis=0)
    if not mask.any():
        return None
    rows, cols = np.nonzero(mask.any(axis=1))[0], np.nonzero(mask.any(axis=0))[0]
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def elrf_support_trials(draws: int = 100, seed: int = 0, channels: int = 4, size: int = 15) -> list[tuple]:
    """Impulse support box of an ELRF block for ``draws`` random weight sets.

    Weights and biases are drawn at unit scale so every tap is clearly
    nonzero; the impulse sits at the centre of a ``size x size`` map.
    """
    rng = np.random.default_rng(seed)
    centre = size // 2
    boxes = []
    for _ in range(draws):
        w = _randomize(B.init_elrf(channels, rng=rng, dtype=np.float64), rng, std=0.5)
        ch = int(rng.integers(channels))
        boxes.append(support_box(impulse_response(lambda x: B.elrf_block(x, w), (channels, size, size),
                                                  ch, centre, centre)))
    return boxes
