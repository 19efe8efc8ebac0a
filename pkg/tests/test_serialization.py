import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regla.attention import GateVariant
from regla.model import ModelConfig
from regla.serialization import (
    FormatError,
    load_tensors,
    parse_ppm,
    parse_tensors,
    read_config,
    read_ppm,
    save_tensors,
    write_config,
    write_ppm,
)


def test_tensor_file_layout(tmp_path):
    path = tmp_path / "t.bin"
    save_tensors(path, {"ab": np.array([[1.0, 2.0, 3.0]], np.float32)})
    raw = path.read_bytes()
    want = (b"RGLA" + struct.pack("<II", 1, 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<BII", 2, 1, 3)
            + struct.pack("<3f", 1, 2, 3))
    assert raw == want


@settings(max_examples=30, deadline=None)
@given(
    shapes=st.lists(st.lists(st.integers(1, 4), min_size=1, max_size=4), min_size=0, max_size=4),
    seed=st.integers(0, 1000),
)
def test_tensor_round_trip(tmp_path_factory, shapes, seed):
    r = np.random.default_rng(seed)
    tensors = {f"t/{i}/ü": r.standard_normal(s).astype(np.float32) for i, s in enumerate(shapes)}
    path = tmp_path_factory.mktemp("rt") / "x.bin"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-3],
    lambda b: b + b"\x00",
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:14],
])
def test_malformed_tensor_files(mutate):
    good = b"RGLA" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"a" + struct.pack("<BI", 1, 2) + b"\0" * 8
    parse_tensors(good)
    with pytest.raises(FormatError):
        parse_tensors(mutate(good))


def test_config_round_trip(tmp_path):
    cfg = ModelConfig.from_variant("S", gate_variant=GateVariant.GATE_DECOUPLED, post_attn="MIB", num_classes=10)
    write_config(tmp_path / "c.txt", cfg, seed=42)
    back, seed = read_config(tmp_path / "c.txt")
    assert back == cfg and seed == 42


def test_config_errors(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("variant=T\ncolour=blue\n")
    with pytest.raises(FormatError):
        read_config(p)
    p.write_text("variant T\n")
    with pytest.raises(FormatError):
        read_config(p)
    p.write_text("# comment\n\nvariant = L\nseed=3\n")
    cfg, seed = read_config(p)
    assert cfg.variant == "L" and seed == 3


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (3, 4, 5)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_allclose(read_ppm(tmp_path / "a.ppm"), img, atol=1e-7)


def test_ppm_header_comments_and_maxval():
    data = b"P6\n# made by hand\n2 1\n# another\n15\n" + bytes([15, 0, 0, 0, 15, 0])
    img = parse_ppm(data)
    assert img.shape == (3, 1, 2) and img.dtype == np.float32
    np.testing.assert_array_equal(img[:, 0, 0], [1, 0, 0])
    np.testing.assert_array_equal(img[:, 0, 1], [0, 1, 0])


@pytest.mark.parametrize("data", [
    b"P3\n1 1\n255\n\x00\x00\x00",
    b"P6\n1 1\n65535\n" + b"\0" * 6,
    b"P6\n2 2\n255\n\x00\x00",
    b"P6\nx 2\n255\n",
    b"P6\n2",
    b"",
])
def test_malformed_ppm(data):
    with pytest.raises(FormatError):
        parse_ppm(data)
