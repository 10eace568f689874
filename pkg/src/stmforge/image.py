"""Simulated image container and on-disk formats.

Images are written as 8-bit binary PGM (P5) for viewing and as raw
little-endian float32 (``.f32``) with a JSON sidecar carrying the
generation metadata.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class SimImage:
    pixels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {self.pixels.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def replace(self, pixels: np.ndarray, **meta) -> SimImage:
        return SimImage(pixels, {**self.meta, **meta})


def to_uint8(values: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> None:
    """Write a P5 PGM with maxval 255; ``pixels`` may be float (mapped from [lo, hi]) or uint8."""
    pixels = np.asarray(pixels)
    data = pixels if pixels.dtype == np.uint8 else to_uint8(pixels, lo, hi)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens = []
    i = 0
    while len(tokens) < count:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:i])
    return tokens, i + 1  # exactly one whitespace byte after maxval


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM into a uint8 (maxval <= 255) or uint16 array."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise ValueError(f"not a binary PGM: magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    n = w * h * dtype.itemsize
    raw = data[offset : offset + n]
    if len(raw) != n:
        raise ValueError(f"PGM payload too short: {len(raw)} of {n} bytes")
    return np.frombuffer(raw, dtype=dtype).reshape(h, w).astype(dtype.newbyteorder("="))


def write_f32(path, values: np.ndarray) -> None:
    np.ascontiguousarray(values, dtype="<f4").tofile(path)


def read_f32(path, shape: tuple[int, ...]) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(shape)


def save_image(img: SimImage, stem) -> list[Path]:
    """Write ``stem.pgm``, ``stem.f32`` and ``stem.json``; returns the paths."""
    stem = Path(stem)
    pgm, f32, js = stem.with_suffix(".pgm"), stem.with_suffix(".f32"), stem.with_suffix(".json")
    write_pgm(pgm, img.pixels)
    write_f32(f32, img.pixels)
    meta = {**img.meta, "shape": list(img.shape), "dtype": "float32-le"}
    js.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [pgm, f32, js]


def load_image(path) -> SimImage:
    """Load an image from its ``.json``/``.f32`` pair, or from a bare PGM."""
    path = Path(path)
    js = path.with_suffix(".json")
    f32 = path.with_suffix(".f32")
    if js.exists() and f32.exists():
        meta = json.loads(js.read_text())
        pixels = read_f32(f32, tuple(meta["shape"]))
        return SimImage(pixels.astype(np.float64), meta)
    pixels = read_pgm(path.with_suffix(".pgm") if path.suffix != ".pgm" else path)
    return SimImage(pixels / 255.0, {"source": path.name})
