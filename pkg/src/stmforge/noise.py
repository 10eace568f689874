"""Measurement noise for simulated images.

Position and brightness jitter act on the projected atoms before rendering;
shot (Poisson), thermal (Gaussian) and scan-line striation noise act on the
rendered pixels. Each stage draws from its own keyed substream of
``NoiseParams.seed``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import rng as _rng
from .image import SimImage
from .lattice import Atoms

STRIATION_WINDOW = 8


@dataclass(frozen=True)
class NoiseParams:
    gaussian_strength: float = 0.0
    poisson_strength: float = 0.0
    striation_strength: float = 0.0
    pos_jitter: float = 0.0
    brightness_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("gaussian_strength", "poisson_strength", "striation_strength", "pos_jitter", "brightness_jitter"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


# defaults used by the simulator and CLI
DEFAULT_NOISE = dict(
    gaussian_strength=0.02,
    poisson_strength=0.2,
    striation_strength=0.01,
    pos_jitter=0.03,
    brightness_jitter=0.1,
)


def jitter_atoms(atoms: Atoms, params: NoiseParams) -> Atoms:
    """Perturb positions with N(0, pos_jitter^2) and scale gains by max(0, 1 + N(0, brightness_jitter^2))."""
    u, v, gain = atoms.u.copy(), atoms.v.copy(), atoms.gain.copy()
    gen = _rng.substream(params.seed, _rng.JITTER)
    n = len(atoms)
    if params.pos_jitter > 0:
        u += gen.normal(0.0, params.pos_jitter, n)
        v += gen.normal(0.0, params.pos_jitter, n)
    if params.brightness_jitter > 0:
        gain *= np.maximum(0.0, 1.0 + gen.normal(0.0, params.brightness_jitter, n))
    return Atoms(u, v, atoms.dist.copy(), gain)


def gaussian_noise(img: SimImage, params: NoiseParams) -> SimImage:
    if params.gaussian_strength == 0:
        return img.replace(img.pixels.copy())
    gen = _rng.substream(params.seed, _rng.GAUSSIAN)
    out = img.pixels + gen.normal(0.0, params.gaussian_strength, img.shape)
    return img.replace(np.clip(out, 0.0, 1.0))


def poisson_noise(img: SimImage, params: NoiseParams) -> SimImage:
    """Shot noise with count scale 255 / poisson_strength (bigger strength, fewer counts)."""
    if params.poisson_strength == 0:
        return img.replace(img.pixels.copy())
    scale = 255.0 / params.poisson_strength
    gen = _rng.substream(params.seed, _rng.POISSON)
    counts = gen.poisson(np.clip(img.pixels, 0.0, None) * scale)
    return img.replace(np.clip(counts / scale, 0.0, 1.0))


def striation_offsets(n_rows: int, strength: float, gen: np.random.Generator, window: int = STRIATION_WINDOW) -> np.ndarray:
    """Row offsets: a unit-variance moving average of white noise, times strength."""
    white = gen.normal(0.0, 1.0, n_rows + window - 1)
    smooth = np.convolve(white, np.ones(window), mode="valid") / math.sqrt(window)
    return strength * smooth


def striation_noise(img: SimImage, params: NoiseParams) -> SimImage:
    if params.striation_strength == 0:
        return img.replace(img.pixels.copy())
    gen = _rng.substream(params.seed, _rng.STRIATION)
    offsets = striation_offsets(img.shape[0], params.striation_strength, gen)
    return img.replace(np.clip(img.pixels + offsets[:, None], 0.0, 1.0))


def apply_noise_pipeline(img: SimImage, params: NoiseParams) -> SimImage:
    """Poisson, then Gaussian, then striation; records ``params`` under ``meta['noise']``."""
    out = poisson_noise(img, params)
    out = gaussian_noise(out, params)
    out = striation_noise(out, params)
    return out.replace(out.pixels, noise=params.to_dict())
