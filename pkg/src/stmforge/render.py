"""Splat projected atoms onto the canvas and run the full simulator."""
from __future__ import annotations

import math

import numpy as np

from . import rng as _rng
from .image import SimImage
from .lattice import Atoms, LatticeSpec, LatticeType, place_atoms, spread_for
from .noise import DEFAULT_NOISE, NoiseParams, apply_noise_pipeline, jitter_atoms

CANVAS = 256
PSF_SIGMA = 3.0
# default lattice constant for generated images: about one atom per 17-px patch
DEFAULT_LATTICE_CONSTANT = 1.5
_CHUNK = 2048


def auto_extent(spec: LatticeSpec, psf_sigma: float = PSF_SIGMA, size: int = CANVAS) -> int:
    """Smallest grid half-width whose scaled sites reach past every canvas corner.

    Projection only stretches in-plane spacings, so covering the corner
    radius in the x-y plane is enough; two spare cells absorb the centroid
    shift and layer snapping.
    """
    reach = size / math.sqrt(2) + 4 * psf_sigma
    return int(math.ceil(reach / (spread_for(spec.lattice) * spec.a))) + 2


def peak_brightness(dist: np.ndarray, brightness_width: float) -> np.ndarray:
    return np.exp(-np.square(dist) / (2.0 * brightness_width**2))


def render(
    atoms: Atoms,
    lattice: LatticeType,
    psf_sigma: float = PSF_SIGMA,
    brightness_width: float = 0.5,
    size: int = CANVAS,
) -> SimImage:
    """Gaussian blobs at spread-scaled atom positions, combined by max.

    The atom centroid lands on pixel (size//2, size//2); u runs along
    columns and v along rows. Blobs falling off the canvas are cropped.
    """
    if not psf_sigma > 0:
        raise ValueError(f"psf_sigma must be positive, got {psf_sigma}")
    canvas = np.zeros((size, size))
    if len(atoms) == 0:
        return SimImage(canvas, {"empty": True})

    s = spread_for(lattice)
    cx = s * atoms.u
    cy = s * atoms.v
    cx = cx - cx.mean() + size // 2
    cy = cy - cy.mean() + size // 2
    peak = atoms.gain * peak_brightness(atoms.dist, brightness_width)

    radius = int(math.ceil(4 * psf_sigma))
    offsets = np.arange(-radius, radius + 1)
    keep = (cx > -radius - 1) & (cx < size + radius) & (cy > -radius - 1) & (cy < size + radius) & (peak > 0)
    cx, cy, peak = cx[keep], cy[keep], peak[keep]
    inv = 1.0 / (2.0 * psf_sigma**2)

    for start in range(0, cx.size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        rows = np.rint(cy[sl]).astype(np.int64)[:, None] + offsets
        cols = np.rint(cx[sl]).astype(np.int64)[:, None] + offsets
        gy = np.exp(-np.square(rows - cy[sl, None]) * inv) * peak[sl, None]
        gx = np.exp(-np.square(cols - cx[sl, None]) * inv)
        blob = gy[:, :, None] * gx[:, None, :]
        rr = np.broadcast_to(rows[:, :, None], blob.shape)
        cc = np.broadcast_to(cols[:, None, :], blob.shape)
        inside = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
        np.maximum.at(canvas, (rr[inside], cc[inside]), blob[inside])

    return SimImage(np.clip(canvas, 0.0, 1.0), {"empty": False})


def simulate_image(
    spec: LatticeSpec,
    noise: NoiseParams | None = None,
    psf_sigma: float = PSF_SIGMA,
    brightness_width: float | None = None,
    use_floor: bool = True,
    size: int = CANVAS,
) -> SimImage:
    """Sites -> projection -> jitter -> render -> pixel noise, all seeded."""
    extent = spec.extent if spec.extent is not None else auto_extent(spec, psf_sigma, size)
    atoms = place_atoms(spec, extent, use_floor=use_floor)
    noise = noise if noise is not None else NoiseParams(seed=spec.seed)
    atoms = jitter_atoms(atoms, noise)
    width = brightness_width if brightness_width is not None else spec.a / 2
    img = render(atoms, spec.lattice, psf_sigma=psf_sigma, brightness_width=width, size=size)
    img = apply_noise_pipeline(img, noise)
    img.meta.update(
        lattice=spec.to_dict(),
        extent=extent,
        n_atoms=len(atoms),
        psf_sigma=psf_sigma,
        brightness_width=width,
        use_floor=use_floor,
    )
    return img


def simulate_series(
    lattice: LatticeType | str,
    count: int,
    seed: int,
    a: float = DEFAULT_LATTICE_CONSTANT,
    noise: dict | None = None,
    **render_kw,
) -> list[tuple[str, SimImage]]:
    """``count`` images of one lattice type, named ``<lattice>_<index>``.

    Image ``i`` draws its orientation and noise from seeds keyed by
    (seed, lattice, i), so adding types or images never changes the others.
    """
    lattice = LatticeType.parse(lattice) if isinstance(lattice, str) else LatticeType(lattice)
    noise_kw = dict(DEFAULT_NOISE if noise is None else noise)
    out = []
    for i in range(count):
        key = (_rng.tag(lattice.value), i)
        spec = LatticeSpec.random(lattice, seed=_rng.derive_seed(seed, *key), a=a)
        params = NoiseParams(**noise_kw, seed=_rng.derive_seed(seed, *key, 1))
        out.append((f"{lattice.value}_{i:04d}", simulate_image(spec, params, **render_kw)))
    return out
