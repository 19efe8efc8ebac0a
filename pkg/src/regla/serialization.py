"""Binary tensor files and key=value config files.

Tensor file layout (little-endian)::

    b"RGLA"  u32 version  u32 count
    count x [ u16 name_len, name (UTF-8), u8 rank, rank x u32 dims, float32 data ]
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .attention import GateVariant
from .errors import ConfigurationError
from .model import ModelConfig

MAGIC = b"RGLA"
FORMAT_VERSION = 1

CONFIG_KEYS = ("variant", "gate_variant", "post_attn", "ffn_expansion", "num_classes", "seed")


class FormatError(ValueError):
    """A tensor or config file is malformed."""


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        encoded = name.encode("utf-8")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    return parse_tensors(buf)


def parse_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic; not a tensor file")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(buf):
                raise FormatError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed tensor file: {exc}") from exc
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor")
    return out


def read_config(path: str | os.PathLike) -> tuple[ModelConfig, int]:
    """Parse a ``key=value`` file into a model config and a seed."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = value
    overrides: dict = {}
    if "gate_variant" in values:
        overrides["gate_variant"] = GateVariant.parse(values["gate_variant"])
    if "post_attn" in values:
        overrides["post_attn"] = values["post_attn"]
    try:
        if "ffn_expansion" in values:
            overrides["ffn_expansion"] = float(values["ffn_expansion"])
        if "num_classes" in values:
            overrides["num_classes"] = int(values["num_classes"])
        seed = int(values.get("seed", 0))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    config = ModelConfig.from_variant(values.get("variant", "M"), **overrides)
    return config, seed


def write_config(path: str | os.PathLike, config: ModelConfig, seed: int = 0) -> None:
    lines = [
        f"variant={config.variant}",
        f"gate_variant={config.gate_variant.value}",
        f"post_attn={config.post_attn}",
        f"ffn_expansion={config.ffn_expansion}",
        f"num_classes={config.num_classes}",
        f"seed={seed}",
    ]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Binary PPM (P6, maxval <= 255) -> float32 (3, H, W) in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    return parse_ppm(data)


def parse_ppm(data: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-numeric PPM header field") from exc
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise FormatError(f"unsupported PPM geometry {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = width * height * 3
    if len(data) - pos < need:
        raise FormatError("truncated PPM pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    img = pixels.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float32) / maxval
    return np.ascontiguousarray(img)


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a (3, H, W) array in [0, 1] as 8-bit P6."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ConfigurationError(f"expected (3, H, W), got {image.shape}")
    _, h, w = image.shape
    pixels = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
