"""Timing, memory and FLOP accounting for attention and whole networks.

FLOPs follow the vision-model convention: one multiply-accumulate counts as
one FLOP. Elementwise work that scales like the surrounding products is
included for the attention kernels so their counts are exact power laws.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from scipy.stats import linregress
from threadpoolctl import threadpool_limits

from .attention import relu_linear_attention, softmax_attention
from .errors import ConfigurationError, FitError
from .model import STAGE_STRIDES, ModelConfig

MECHANISMS = ("relu_linear", "softmax")
CSV_HEADER = ("mechanism", "N", "d", "repeat", "wall_time_s", "flops", "peak_alloc_bytes")

# expected exponent and half-width of the acceptance band
SLOPE_BANDS = {"relu_linear": (1.0, 0.2), "softmax": (2.0, 0.3)}
MIN_R2 = 0.95


@dataclass
class BenchRecord:
    mechanism: str
    N: int
    d: int
    wall_time: float  # median seconds per call
    flops: int
    peak_alloc: int
    times: list[float] = field(default_factory=list)
    flagged: bool = False  # timer too coarse; excluded from fits


class SlopeFit(NamedTuple):
    slope: float
    intercept: float
    r2: float


def attention_flops(mechanism: str, n: int, d: int) -> int:
    if mechanism == "relu_linear":
        # K^T V and Q S: n d^2 each; relu x2, key sum, denominator, division: n d each
        return 2 * n * d * d + 5 * n * d
    if mechanism == "softmax":
        # Q K^T and P V: n^2 d each; scale, max-shift, exp, normalize: n^2 each
        return n * n * (2 * d + 4)
    raise ConfigurationError(f"unknown mechanism {mechanism!r}")


def attention_fn(mechanism: str) -> Callable:
    if mechanism == "relu_linear":
        return relu_linear_attention
    if mechanism == "softmax":
        return softmax_attention
    raise ConfigurationError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


def bench_inputs(n: int, d: int, seed: int = 0, dtype=np.float32):
    """Q, K, V for one (N, d) cell; identical for every mechanism."""
    rng = np.random.default_rng([seed, n, d])
    return tuple(rng.standard_normal((n, d)).astype(dtype) for _ in range(3))


def peak_alloc_bytes(fn: Callable, *args) -> int:
    """Peak traced allocation while running ``fn(*args)``, net of what was live before."""
    tracemalloc.start()
    try:
        base, _ = tracemalloc.get_traced_memory()
        tracemalloc.reset_peak()
        result = fn(*args)
        _, peak = tracemalloc.get_traced_memory()
        del result
    finally:
        tracemalloc.stop()
    return peak - base


def _time_calls(fn, args, repeats, warmup, min_time):
    for _ in range(warmup):
        t0 = time.perf_counter()
        fn(*args)
        single = time.perf_counter() - t0
    number = max(1, math.ceil(min_time / max(single, 1e-9))) if warmup else 1
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(number):
            fn(*args)
        times.append((time.perf_counter() - t0) / number)
    return times


def sweep_attention(mechanism: str, n_values: Sequence[int], d: int = 64, repeats: int = 5,
                    warmup: int = 2, seed: int = 0, dtype=np.float32, min_time: float = 0.02,
                    measure_memory: bool = True) -> list[BenchRecord]:
    """Median wall time per call for each N, single-threaded.

    Each repeat loops the call enough times to last at least ``min_time``
    seconds, so small-N cells are not limited by timer resolution.
    """
    fn = attention_fn(mechanism)
    n_values = [int(n) for n in n_values]
    if len(n_values) < 4 or any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise ConfigurationError(f"need at least 4 strictly ascending N values, got {n_values}")
    if repeats < 5 or warmup < 1:
        raise ConfigurationError("need repeats >= 5 and at least one warm-up call")

    resolution = time.get_clock_info("perf_counter").resolution
    records = []
    for n in n_values:
        args = bench_inputs(n, d, seed, dtype)
        with threadpool_limits(limits=1):
            times = _time_calls(fn, args, repeats, warmup, min_time)
        peak = peak_alloc_bytes(fn, *args) if measure_memory else 0
        median = statistics.median(times)
        records.append(BenchRecord(mechanism, n, d, median, attention_flops(mechanism, n, d), peak,
                                   times, flagged=median < 100 * resolution))
    return records


def fit_loglog_slope(points: Iterable) -> SlopeFit:
    """Least-squares line through (ln N, ln t).

    ``points`` holds ``BenchRecord`` items (flagged ones are skipped) or
    ``(N, t)`` pairs.
    """
    xs, ys = [], []
    for p in points:
        if isinstance(p, BenchRecord):
            if p.flagged:
                continue
            n, t = p.N, p.wall_time
        else:
            n, t = p
        xs.append(math.log(n))
        ys.append(math.log(t))
    if len(xs) < 4 or len(set(xs)) < 2:
        raise FitError(f"need >= 4 points with distinct N, got {len(xs)}")
    fit = linregress(xs, ys)
    return SlopeFit(float(fit.slope), float(fit.intercept), float(fit.rvalue**2))


def slope_verdict(mechanism: str, fit: SlopeFit, band_scale: float = 1.0) -> bool:
    center, half = SLOPE_BANDS[mechanism]
    half *= band_scale
    return center - half <= fit.slope <= center + half and fit.r2 >= MIN_R2


def write_csv(records: Sequence[BenchRecord], path) -> int:
    """One row per repeat; returns the number of data rows written."""
    rows = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            for i, t in enumerate(r.times):
                w.writerow([r.mechanism, r.N, r.d, i, repr(t), r.flops, r.peak_alloc])
                rows += 1
    return rows


def memory_scaling(mechanism: str, n_values: Sequence[int], d: int = 16, dtype=np.float64):
    """Peak allocation per N and successive growth ratios net of the N=1 overhead."""
    fn = attention_fn(mechanism)
    base = peak_alloc_bytes(fn, *bench_inputs(1, d, dtype=dtype))
    peaks = [peak_alloc_bytes(fn, *bench_inputs(n, d, dtype=dtype)) for n in n_values]
    ratios = [(b - base) / (a - base) for a, b in zip(peaks, peaks[1:])]
    return peaks, ratios


# --------------------------------------------------------------------------
# whole-network FLOPs


def _conv(c_out, c_in_per_group, k, h, w):
    return c_out * c_in_per_group * k * k * h * w


def model_flops(config: ModelConfig, resolution: int) -> dict[str, int]:
    """Analytic per-stage FLOPs; each stage entry includes its incoming downsample."""
    if resolution % 32:
        raise ConfigurationError(f"resolution {resolution} is not divisible by 32")
    c = config.channels
    out: dict[str, int] = {}
    s1, s0 = resolution // 4, resolution // 2
    mid = max(c[0] // 2, 1)
    out["stem"] = _conv(mid, 3, 3, s0, s0) + _conv(c[0], mid, 3, s1, s1)

    for i in range(4):
        r = resolution // STAGE_STRIDES[i]
        n = r * r
        ch = c[i]
        hc = int(config.ffn_expansion * ch)
        total = _conv(ch, c[i - 1], 3, r, r) if i else 0
        if i < 2:
            if config.early_stage_kind == "ELRF":
                per_block = _conv(ch, 1, 3, r, r) + 2 * ch * hc * n + _conv(hc, 1, 5, r, r)
            else:
                k = int(config.early_stage_kind[4:])
                per_block = _conv(ch, 1, k, r, r) + 2 * ch * hc * n
        else:
            per_block = _conv(ch, 1, 3, r, r)  # CPE
            per_block += 3 * ch * ch * n + _conv(ch, 1, 3, r, r)  # q/k/v projections and gate
            per_block += attention_flops("relu_linear", n, ch)
            if config.post_attn == "Conv3":
                per_block += _conv(ch, 1, 3, r, r) + ch * ch * n
            elif config.post_attn == "FFN":
                per_block += 2 * ch * hc * n
            else:
                per_block += 2 * ch * hc * n + _conv(hc, 1, 3, r, r)
        out[f"stage{i + 1}"] = total + config.blocks[i] * per_block

    fc_in = config.head_hidden or c[3]
    out["head"] = (c[3] * config.head_hidden if config.head_hidden else 0) + fc_in * config.num_classes
    out["total"] = sum(out.values())
    return out
