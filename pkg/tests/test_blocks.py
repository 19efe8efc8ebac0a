import numpy as np
import pytest

import oracles
from regla import blocks as B
from regla.attention import GateVariant
from regla.errors import ConfigurationError
from regla.verify import _randomize, impulse_response, support_box


def _rand(w, rng, std=0.5):
    return _randomize(w, rng, std)


ZERO_IDENTITY = [
    ("ffn", lambda c: B.init_ffn(c), B.ffn_block),
    ("mib", lambda c: B.init_mib(c), B.mib_block),
    ("cpe", lambda c: B.init_cpe(c), B.cpe_block),
    ("conv3", lambda c: B.init_conv3_post(c), B.conv3_post),
    ("elrf", lambda c: B.init_elrf(c), B.elrf_block),
    ("conv7", lambda c: B.init_convk(c, 7), B.convk_block),
]


@pytest.mark.parametrize("name, init, apply", ZERO_IDENTITY, ids=[z[0] for z in ZERO_IDENTITY])
def test_zero_weights_is_identity(name, init, apply, rng):
    x = rng.standard_normal((6, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(apply(x, B.zeroed(init(6))), x)


@pytest.mark.parametrize("kind", B.POST_ATTENTION_KINDS)
def test_post_attention_zero_and_shape(kind, rng):
    x = rng.standard_normal((8, 4, 6)).astype(np.float32)
    w = B.init_post_attention(kind, 8)
    np.testing.assert_array_equal(B.post_attention(x, B.zeroed(w), kind), x)
    y = B.post_attention(x, _rand(w, rng), kind)
    assert y.shape == x.shape and np.all(np.isfinite(y))


def test_unknown_post_kind():
    with pytest.raises(ConfigurationError):
        B.init_post_attention("Conv5", 4)
    with pytest.raises(ConfigurationError):
        B.post_attention(np.zeros((4, 2, 2)), {}, "Conv5")


def test_elrf_impulse_support_is_7x7(rng):
    for _ in range(5):
        w = _rand(B.init_elrf(4, rng=rng, dtype=np.float64), rng)
        resp = impulse_response(lambda x: B.elrf_block(x, w), (4, 13, 13), 1, 6, 6)
        assert support_box(resp) == (3, 9, 3, 9)


def test_two_elrf_blocks_compose_to_13x13(rng):
    w1 = _rand(B.init_elrf(3, rng=rng, dtype=np.float64), rng)
    w2 = _rand(B.init_elrf(3, rng=rng, dtype=np.float64), rng)
    resp = impulse_response(lambda x: B.elrf_block(B.elrf_block(x, w1), w2), (3, 17, 17), 0, 8, 8)
    assert support_box(resp) == (2, 14, 2, 14)


def test_mib_impulse_support_is_3x3(rng):
    w = _rand(B.init_mib(4, rng=rng, dtype=np.float64), rng)
    resp = impulse_response(lambda x: B.mib_block(x, w), (4, 9, 9), 2, 4, 4)
    assert support_box(resp) == (3, 5, 3, 5)


def test_elrf_shape_and_channel_check(rng):
    w = B.init_elrf(8, rng=rng)
    x = rng.standard_normal((8, 7, 5)).astype(np.float32)
    assert B.elrf_block(x, w).shape == x.shape
    with pytest.raises(ConfigurationError):
        B.elrf_block(np.zeros((4, 7, 5), np.float32), w)


def test_ffn_param_count():
    assert B.count_params(B.init_ffn(8, 2)) == 8 * 16 + 16 + 16 * 8 + 8
    with pytest.raises(ConfigurationError):
        B.init_ffn(5, 1.5)
    assert B.hidden_width(10, 1.5) == 15


def test_mib_param_count():
    c, hc = 8, 16
    assert B.count_params(B.init_mib(c, 2)) == c * hc + hc + hc * 9 + hc + hc * c + c


def test_conv3_smaller_than_ffn():
    for c in (8, 64, 192):
        assert B.count_params(B.init_conv3_post(c)) < B.count_params(B.init_ffn(c, 2))


def test_ffn_is_per_position(rng):
    w = _rand(B.init_ffn(4), rng)
    x = rng.standard_normal((4, 3, 5))
    perm = rng.permutation(15)
    shuffled = x.reshape(4, -1)[:, perm].reshape(4, 3, 5)
    out = B.ffn_block(x, w).reshape(4, -1)[:, perm].reshape(4, 3, 5)
    np.testing.assert_allclose(B.ffn_block(shuffled, w), out, rtol=1e-12)


def test_cpe_identity_kernel_and_oracle(rng):
    x = rng.standard_normal((3, 5, 5))
    w = {"dw_w": np.zeros((3, 1, 3, 3)), "dw_b": np.zeros(3)}
    w["dw_w"][:, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(B.cpe_block(x, w), 2 * x)
    w = _rand(B.init_cpe(3), rng)
    want = x + oracles.conv2d(x, w["dw_w"], w["dw_b"], padding=1, groups=3)
    assert oracles.rel_err(B.cpe_block(x, w), want) < 1e-10


def test_stem_shapes(rng):
    w = B.init_stem(48, rng=rng)
    assert B.stem(rng.random((3, 224, 224)).astype(np.float32), w).shape == (48, 56, 56)
    w8 = B.init_stem(16, rng=rng)
    x = rng.random((3, 8, 8)).astype(np.float32)
    a = B.stem(x, w8)
    assert a.shape == (16, 2, 2)
    assert a.tobytes() == B.stem(x.copy(), w8).tobytes()
    with pytest.raises(ConfigurationError):
        B.stem(rng.random((3, 10, 8)), w8)


def test_downsample(rng):
    w = B.init_downsample(96, 192, rng=rng)
    assert B.downsample(rng.standard_normal((96, 28, 28)).astype(np.float32), w).shape == (192, 14, 14)
    w = _rand(B.init_downsample(8, 5, rng=rng), rng)
    x = rng.standard_normal((8, 2, 2))
    out = B.downsample(x, w)
    assert out.shape == (5, 1, 1)
    # default BN statistics (mean 0, var 1) leave only the learnable affine
    conv = oracles.conv2d(x, w["conv_w"], stride=2, padding=1)
    want = conv / np.sqrt(1 + 1e-5) * w["bn_scale"][:, None, None] + w["bn_shift"][:, None, None]
    assert oracles.rel_err(out, want) < 1e-10
    with pytest.raises(ConfigurationError):
        B.downsample(np.zeros((8, 3, 4)), w)


@pytest.mark.parametrize("variant", list(GateVariant))
@pytest.mark.parametrize("post", B.POST_ATTENTION_KINDS)
def test_rgma_block_shape_and_finiteness(variant, post, rng):
    w = B.init_rgma_block(8, post, rng=rng)
    x = rng.standard_normal((8, 4, 4)).astype(np.float32)
    y = B.rgma_block(x, w, variant, post)
    assert y.shape == x.shape and y.dtype == np.float32 and np.all(np.isfinite(y))


def test_count_params_skips_running_stats():
    w = B.init_downsample(4, 8)
    assert B.count_params(w) == 8 * 4 * 9 + 8 + 8


def test_block_spec_validation():
    B.BlockSpec("ELRF", 8, 8)
    B.BlockSpec("Downsample", 8, 16, stride=2)
    with pytest.raises(ConfigurationError):
        B.BlockSpec("ELRF", 8, 16)
    with pytest.raises(ConfigurationError):
        B.BlockSpec("FFN", 8, 8, stride=2)
    with pytest.raises(ConfigurationError):
        B.BlockSpec("Pool", 8, 8)
