import numpy as np
import pytest

from regla import blocks as B
from regla.attention import GateVariant
from regla.errors import ConfigurationError
from regla.model import VARIANTS, ModelConfig, build, count_params, forward, stage_resolutions
from regla.verify import TINY_CONFIG

REPORTED_PARAMS_M = {"T": 3.8, "S": 6.4, "M": 9.6, "L": 19.9, "X": 39.8}


def closed_form_params(cfg: ModelConfig) -> int:
    """Parameter count written out layer by layer, independent of the builder."""
    c = cfg.channels
    mid = c[0] // 2
    total = mid * 3 * 9 + 2 * mid + c[0] * mid * 9 + 2 * c[0]
    for i in range(4):
        ch = c[i]
        hc = int(cfg.ffn_expansion * ch)
        if i:
            total += ch * c[i - 1] * 9 + 2 * ch
        if i < 2:
            block = 10 * ch + (ch * hc + hc) + 26 * hc + (hc * ch + ch)
        else:
            block = 10 * ch + 2 * ch + (3 * ch * ch + 10 * ch) + (10 * ch + ch * ch + ch)
        total += cfg.blocks[i] * block
    hh = cfg.head_hidden
    total += 2 * c[3] + c[3] * hh + hh + hh * cfg.num_classes + cfg.num_classes
    return total


def test_variants_match_table():
    assert VARIANTS["T"][:2] == ((2, 2, 16, 6), (32, 64, 128, 256))
    assert VARIANTS["S"][:2] == ((2, 2, 19, 6), (32, 64, 160, 320))
    assert VARIANTS["M"][:2] == ((2, 2, 22, 6), (48, 96, 192, 384))
    assert VARIANTS["L"][:2] == ((3, 3, 31, 9), (64, 128, 256, 448))
    assert VARIANTS["X"][:2] == ((4, 4, 43, 12), (64, 128, 336, 512))


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_param_budget(variant):
    cfg = ModelConfig.from_variant(variant)
    total, breakdown = count_params(build(cfg))
    assert total == closed_form_params(cfg) == sum(breakdown.values())
    assert abs(total / 1e6 - REPORTED_PARAMS_M[variant]) <= 0.10 * REPORTED_PARAMS_M[variant]


def test_budgets_strictly_increase():
    totals = [closed_form_params(ModelConfig.from_variant(v)) for v in "TSMLX"]
    assert all(a < b for a, b in zip(totals, totals[1:]))


def test_stage_resolutions_and_block_counts():
    assert stage_resolutions(224) == [56, 28, 14, 7]
    model = build(ModelConfig.from_variant("T"))
    assert [len(s["blocks"]) for s in model.params["stages"]] == [2, 2, 16, 6]


def test_same_seed_same_weights():
    a = build(TINY_CONFIG, seed=3).named_parameters()
    b = build(TINY_CONFIG, seed=3).named_parameters()
    c = build(TINY_CONFIG, seed=4).named_parameters()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if a[k].std() > 0)


def test_forward_t_224():
    model = build(ModelConfig.from_variant("T"))
    x = np.random.default_rng(0).random((3, 224, 224)).astype(np.float32)
    logits, feats = forward(model, x)
    assert logits.shape == (1000,) and np.all(np.isfinite(logits))
    assert [f.shape for f in feats] == [(32, 56, 56), (64, 28, 28), (128, 14, 14), (256, 7, 7)]
    again, _ = model.forward(x)
    assert logits.tobytes() == again.tobytes()


def test_doubling_resolution_doubles_feature_dims():
    model = build(TINY_CONFIG)
    x = np.random.default_rng(0).random((3, 64, 64)).astype(np.float32)
    _, small = forward(model, x)
    _, large = forward(model, np.kron(x, np.ones((1, 2, 2), np.float32)))
    for s, l in zip(small, large):
        assert l.shape[1:] == (2 * s.shape[1], 2 * s.shape[2])


def test_forward_rejects_bad_input():
    model = build(TINY_CONFIG)
    with pytest.raises(ConfigurationError):
        forward(model, np.zeros((3, 48, 64), np.float32))
    with pytest.raises(ConfigurationError):
        forward(model, np.zeros((1, 64, 64), np.float32))


@pytest.mark.parametrize("changes", [
    {"early_stage_kind": "Conv7"},
    {"early_stage_kind": "Conv9"},
    {"gate_variant": GateVariant.NO_GATE},
    {"gate_variant": "decoupled"},
    {"post_attn": "FFN"},
    {"post_attn": "MIB"},
    {"head_hidden_ratio": 0},
])
def test_ablation_configs_build_and_run(changes):
    cfg = TINY_CONFIG.replace(**changes)
    logits, _ = forward(build(cfg, seed=1), np.random.default_rng(1).random((3, 64, 64)).astype(np.float32))
    assert logits.shape == (cfg.num_classes,) and np.all(np.isfinite(logits))


@pytest.mark.parametrize("changes", [
    {"blocks": (1, 1, 1)},
    {"channels": (4, 4, 0, 8)},
    {"post_attn": "Conv5"},
    {"early_stage_kind": "Conv5"},
    {"ffn_expansion": 1.3},
    {"gate_variant": "half"},
])
def test_invalid_configs(changes):
    with pytest.raises(ConfigurationError):
        TINY_CONFIG.replace(**changes)


def test_unknown_variant():
    with pytest.raises(ConfigurationError, match="T, S, M, L, X"):
        ModelConfig.from_variant("Z")


def test_load_state_round_trip():
    src = build(TINY_CONFIG, seed=1)
    dst = build(TINY_CONFIG, seed=2)
    dst.load_state(src.named_parameters())
    x = np.random.default_rng(0).random((3, 32, 32)).astype(np.float32)
    assert forward(src, x)[0].tobytes() == forward(dst, x)[0].tobytes()
    state = src.named_parameters()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        dst.load_state(state)


def test_attention_stage_uses_early_blocks_only_in_first_two_stages():
    model = build(TINY_CONFIG)
    stages = model.params["stages"]
    assert all("dw3_w" in b for s in stages[:2] for b in s["blocks"])
    assert all("attn" in b for s in stages[2:] for b in s["blocks"])
    assert stages[0]["downsample"] is None and all(s["downsample"] for s in stages[1:])
    assert B.count_params(model.params["head"]) > 0
