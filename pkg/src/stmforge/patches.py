"""Normalization, stride-based patch extraction, dihedral augmentation and
train/validation dataset assembly, plus the STMP1 patch archive format.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng as _rng

ARCHIVE_MAGIC = b"STMP1"


class DegenerateImageError(ValueError):
    """Raised when an image has no dynamic range to normalize."""


def normalize(values: np.ndarray) -> np.ndarray:
    """Map [min, max] of ``values`` affinely onto [-1, 1]."""
    x = np.asarray(values, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if not hi > lo:
        raise DegenerateImageError(f"cannot normalize a constant image (value {lo})")
    return (2.0 * x - (hi + lo)) / (hi - lo)


def patch_count(size: int, patch: int, stride: int) -> int:
    """Patches per axis for a ``size``-wide image."""
    return (size - patch) // stride + 1


def extract_patches(img: np.ndarray, patch: int, stride: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """All full ``patch`` x ``patch`` tiles at top-left offsets that are multiples of ``stride``.

    Returns ``(tiles, origins)``: tiles of shape (n, patch, patch) in
    row-major order of their origins, and origins of shape (n, 2) as (row, col).
    """
    img = np.asarray(img)
    h, w = img.shape
    if patch > min(h, w):
        raise ValueError(f"patch size {patch} exceeds image size {h}x{w}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    win = sliding_window_view(img, (patch, patch))[::stride, ::stride]
    nr, nc = win.shape[:2]
    tiles = win.reshape(nr * nc, patch, patch).copy()
    r, c = np.meshgrid(np.arange(nr) * stride, np.arange(nc) * stride, indexing="ij")
    return tiles, np.column_stack([r.ravel(), c.ravel()])


# ---------------------------------------------------------------- augmentation
# Op codes pack quarter turns in bits 0-1, horizontal flip in bit 2 and
# vertical flip in bit 3; rotation is applied first. The 16 codes cover the
# 8-element dihedral group twice.


def dihedral(patch: np.ndarray, code: int) -> np.ndarray:
    """Apply dihedral op ``code`` to the last two axes."""
    k, hflip, vflip = code & 3, (code >> 2) & 1, (code >> 3) & 1
    out = np.rot90(patch, k, axes=(-2, -1))
    if hflip:
        out = out[..., :, ::-1]
    if vflip:
        out = out[..., ::-1, :]
    return out


def draw_ops(gen: np.random.Generator, n: int) -> np.ndarray:
    """Uniform quarter turn plus independent fair horizontal/vertical flips."""
    k = gen.integers(0, 4, n)
    hflip = gen.integers(0, 2, n)
    vflip = gen.integers(0, 2, n)
    return k | (hflip << 2) | (vflip << 3)


def augment(patch: np.ndarray, seed: int) -> np.ndarray:
    code = int(draw_ops(_rng.substream(seed, _rng.AUGMENT), 1)[0])
    return np.ascontiguousarray(dihedral(patch, code))


def augment_batch(batch: np.ndarray, codes: np.ndarray) -> np.ndarray:
    out = np.empty_like(batch)
    for code in np.unique(codes):
        sel = codes == code
        out[sel] = dihedral(batch[sel], int(code))
    return out


# ---------------------------------------------------------------- datasets


@dataclass
class PatchSet:
    """Patches with provenance rows (image_id, row, col)."""

    values: np.ndarray
    source: np.ndarray

    def __len__(self) -> int:
        return len(self.values)

    @property
    def patch_size(self) -> int:
        return self.values.shape[-1]

    def subset(self, idx) -> PatchSet:
        return PatchSet(self.values[idx], self.source[idx])


@dataclass
class DatasetSplit:
    train: PatchSet
    val: PatchSet
    split_fraction: float = 0.9
    seed: int = 0
    labels: dict = field(default_factory=dict)  # image_id -> lattice name

    @property
    def patch_size(self) -> int:
        return self.train.patch_size if len(self.train) else self.val.patch_size


def sample_patches(
    images: list[np.ndarray],
    patch: int,
    stride: int,
    patches_per_image: int | None,
    seed: int,
    image_ids: list[int] | None = None,
) -> PatchSet:
    """Normalize each image and draw ``patches_per_image`` tiles without replacement.

    ``None`` keeps every tile. Selected tiles keep their raster order.
    """
    image_ids = list(range(len(images))) if image_ids is None else list(image_ids)
    values, sources = [], []
    for img_id, img in zip(image_ids, images):
        tiles, origins = extract_patches(normalize(img), patch, stride)
        if patches_per_image is not None:
            if patches_per_image > len(tiles):
                raise ValueError(f"requested {patches_per_image} patches but only {len(tiles)} are available per image")
            gen = _rng.substream(seed, _rng.SUBSAMPLE, img_id)
            pick = np.sort(gen.choice(len(tiles), patches_per_image, replace=False))
            tiles, origins = tiles[pick], origins[pick]
        values.append(tiles.astype(np.float32))
        sources.append(np.column_stack([np.full(len(tiles), img_id), origins]))
    if not values:
        return PatchSet(np.zeros((0, patch, patch), np.float32), np.zeros((0, 3), np.int64))
    return PatchSet(np.concatenate(values), np.concatenate(sources).astype(np.int64))


def split_patches(patches: PatchSet, split_fraction: float, seed: int) -> tuple[PatchSet, PatchSet]:
    if not 0 < split_fraction < 1:
        raise ValueError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    n = len(patches)
    n_train = int(round(split_fraction * n))
    order = _rng.substream(seed, _rng.SPLIT).permutation(n)
    return patches.subset(np.sort(order[:n_train])), patches.subset(np.sort(order[n_train:]))


def build_dataset(
    images: list[np.ndarray],
    patch: int,
    stride: int = 4,
    patches_per_image: int | None = None,
    split_fraction: float = 0.9,
    seed: int = 0,
) -> DatasetSplit:
    pixels = [getattr(im, "pixels", im) for im in images]
    patches = sample_patches(pixels, patch, stride, patches_per_image, seed)
    train, val = split_patches(patches, split_fraction, seed)
    return DatasetSplit(train, val, split_fraction, seed)


# ---------------------------------------------------------------- archive


def write_archive(path, values: np.ndarray) -> None:
    """Header: magic, patch size and count as little-endian uint32; then float32 LE data."""
    values = np.asarray(values)
    n, p, q = values.shape
    if p != q:
        raise ValueError("patches must be square")
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC + struct.pack("<II", p, n))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_archive(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:5] != ARCHIVE_MAGIC:
        raise ValueError(f"{path}: not an STMP1 patch archive")
    p, n = struct.unpack("<II", data[5:13])
    body = np.frombuffer(data, dtype="<f4", offset=13)
    if body.size != n * p * p:
        raise ValueError(f"{path}: expected {n * p * p} values, found {body.size}")
    return body.reshape(n, p, p).astype(np.float32)


def save_patch_set(patches: PatchSet, path, manifest: dict) -> tuple[Path, Path]:
    """Archive plus JSON manifest (``path`` with ``.json``) holding provenance rows."""
    path = Path(path)
    write_archive(path, patches.values)
    side = path.with_suffix(".json")
    doc = {**manifest, "patch_size": patches.patch_size, "count": len(patches), "source": patches.source.tolist()}
    side.write_text(json.dumps(doc, sort_keys=True) + "\n")
    return path, side


def load_patch_set(path) -> tuple[PatchSet, dict]:
    path = Path(path)
    values = read_archive(path)
    doc = json.loads(path.with_suffix(".json").read_text())
    source = np.asarray(doc.pop("source"), dtype=np.int64).reshape(-1, 3)
    if len(source) != len(values):
        raise ValueError(f"{path}: manifest lists {len(source)} patches, archive holds {len(values)}")
    return PatchSet(values, source), doc
