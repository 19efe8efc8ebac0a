import csv
import math

import numpy as np
import pytest

from regla import bench as BN
from regla.attention import relu_linear_attention, softmax_attention
from regla.errors import ConfigurationError, FitError
from regla.model import ModelConfig


def test_flop_formulas_scale_exactly():
    for d in (16, 64):
        for n in (256, 1000, 4096):
            assert BN.attention_flops("relu_linear", 2 * n, d) == 2 * BN.attention_flops("relu_linear", n, d)
            assert BN.attention_flops("softmax", 2 * n, d) == 4 * BN.attention_flops("softmax", n, d)
    with pytest.raises(ConfigurationError):
        BN.attention_flops("cosine", 4, 4)


def test_flop_exponents_are_one_and_two():
    ns = [256, 1024, 4096, 16384]
    for mech, want in (("relu_linear", 1.0), ("softmax", 2.0)):
        fit = BN.fit_loglog_slope([(n, BN.attention_flops(mech, n, 64)) for n in ns])
        assert fit.slope == pytest.approx(want, abs=1e-12)


def test_fit_on_synthetic_power_laws():
    ns = [10, 20, 40, 80, 160]
    assert BN.fit_loglog_slope([(n, 3e-6 * n) for n in ns]).slope == pytest.approx(1.0, abs=1e-9)
    fit = BN.fit_loglog_slope([(n, 5e-9 * n * n) for n in ns])
    assert fit.slope == pytest.approx(2.0, abs=1e-9) and fit.r2 == pytest.approx(1.0)
    with pytest.raises(FitError):
        BN.fit_loglog_slope([(8, 1.0)] * 5)
    with pytest.raises(FitError):
        BN.fit_loglog_slope([(8, 1.0), (16, 2.0), (32, 4.0)])


def test_fit_skips_flagged_records():
    recs = [BN.BenchRecord("relu_linear", n, 4, 1e-3 * n, 0, 0) for n in (2, 4, 8, 16)]
    recs.insert(0, BN.BenchRecord("relu_linear", 1, 4, 50.0, 0, 0, flagged=True))
    assert BN.fit_loglog_slope(recs).slope == pytest.approx(1.0)


def test_slope_verdict_bands():
    good = BN.SlopeFit(1.1, 0.0, 0.99)
    assert BN.slope_verdict("relu_linear", good)
    assert not BN.slope_verdict("relu_linear", good, band_scale=0.1)
    assert not BN.slope_verdict("relu_linear", BN.SlopeFit(1.1, 0.0, 0.5))
    assert BN.slope_verdict("softmax", BN.SlopeFit(2.29, 0.0, 0.96))
    assert not BN.slope_verdict("softmax", BN.SlopeFit(1.6, 0.0, 0.99))
    assert BN.slope_verdict("softmax", BN.SlopeFit(1.6, 0.0, 0.99), band_scale=10)


def test_small_sweep_and_csv(tmp_path):
    ns = [16, 32, 64, 128]
    recs = BN.sweep_attention("relu_linear", ns, d=8, repeats=5, min_time=1e-3)
    assert [r.N for r in recs] == ns
    assert all(r.wall_time > 0 and len(r.times) == 5 and r.peak_alloc > 0 for r in recs)
    path = tmp_path / "b.csv"
    assert BN.write_csv(recs, path) == 20
    raw = path.read_bytes()
    assert b"\r" not in raw
    rows = list(csv.reader(raw.decode("utf-8").splitlines(), strict=True))
    assert tuple(rows[0]) == BN.CSV_HEADER
    assert len(rows) == 21 and all(len(r) == 7 for r in rows)
    assert {int(r[1]) for r in rows[1:]} == set(ns)


def test_sweep_preconditions():
    with pytest.raises(ConfigurationError):
        BN.sweep_attention("relu_linear", [8, 16, 32], d=4)
    with pytest.raises(ConfigurationError):
        BN.sweep_attention("relu_linear", [8, 32, 16, 64], d=4)
    with pytest.raises(ConfigurationError):
        BN.sweep_attention("relu_linear", [8, 16, 32, 64], d=4, repeats=3)
    with pytest.raises(ConfigurationError):
        BN.sweep_attention("flash", [8, 16, 32, 64], d=4)


def test_inputs_shared_across_mechanisms():
    a = BN.bench_inputs(64, 8, seed=3)
    b = BN.bench_inputs(64, 8, seed=3)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert a[0].dtype == np.float32


def test_bench_mode_does_not_change_outputs():
    q, k, v = BN.bench_inputs(128, 8)
    want_lin = relu_linear_attention(q, k, v)
    want_soft = softmax_attention(q, k, v)
    BN.sweep_attention("relu_linear", [32, 64, 128, 256], d=8, min_time=1e-4)
    assert BN.attention_fn("relu_linear")(q, k, v).tobytes() == want_lin.tobytes()
    assert BN.attention_fn("softmax")(q, k, v).tobytes() == want_soft.tobytes()


def test_memory_ratio_linear_vs_quadratic():
    _, lin = BN.memory_scaling("relu_linear", [512, 1024, 2048, 4096])
    _, quad = BN.memory_scaling("softmax", [256, 512, 1024])
    assert all(1.8 <= r <= 2.4 for r in lin), lin
    assert all(r > 3.2 for r in quad), quad


def test_model_flops_m_224():
    flops = BN.model_flops(ModelConfig.from_variant("M"), 224)
    assert flops["total"] == sum(v for k, v in flops.items() if k != "total")
    assert abs(flops["total"] / 1e9 - 1.24) <= 0.25 * 1.24


def test_model_flops_scale_with_resolution():
    cfg = ModelConfig.from_variant("M")
    lo, hi = BN.model_flops(cfg, 224), BN.model_flops(cfg, 448)
    for key in ("stem", "stage1", "stage2", "stage3", "stage4"):
        assert hi[key] == 4 * lo[key]
    assert hi["head"] == lo["head"]
    n224, n512 = 14 * 14, 32 * 32
    ratio = BN.attention_flops("relu_linear", n512, 192) / BN.attention_flops("relu_linear", n224, 192)
    assert ratio == pytest.approx((32 / 14) ** 2, rel=1e-12)
    with pytest.raises(ConfigurationError):
        BN.model_flops(cfg, 100)


def test_model_flops_conv_stage_hand_count():
    cfg = ModelConfig(variant="x", blocks=(1, 1, 1, 1), channels=(4, 8, 8, 8), num_classes=3,
                      head_hidden_ratio=0)
    flops = BN.model_flops(cfg, 32)
    # stage1 at 8x8, C=4, hidden 8: dw3 + pw1 + dw5 + pw2
    assert flops["stage1"] == 64 * (4 * 9 + 4 * 8 + 8 * 25 + 8 * 4)
    assert flops["head"] == 8 * 3
    assert math.isclose(flops["stem"], 2 * 3 * 9 * 256 + 4 * 2 * 9 * 64)
