"""Lattice sites and tilted-plane projection geometry.

Sites are generated in the x-y plane (cubic types also carry a sublattice
height ``z0``, which the projection ignores), lifted onto a randomly tilted
cutting plane, projected onto the plane normal to get a distance, and
flattened into 2D in-plane coordinates rotated by a third random angle.
"""
from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import rng as _rng


class LatticeType(str, enum.Enum):
    SIMPLE_CUBIC = "simple_cubic"
    BCC = "bcc"
    FCC = "fcc"
    HEX1 = "hex1"
    HEX2 = "hex2"

    @property
    def is_cubic(self) -> bool:
        return self in (LatticeType.SIMPLE_CUBIC, LatticeType.BCC, LatticeType.FCC)

    @classmethod
    def parse(cls, name: str) -> LatticeType:
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        key = _ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(t.value for t in cls)
            raise ValueError(f"unknown lattice type {name!r} (expected one of: {valid})") from None


_ALIASES = {
    "sc": "simple_cubic",
    "cubic": "simple_cubic",
    "simplecubic": "simple_cubic",
    "hexagonal1": "hex1",
    "hexagonal_1": "hex1",
    "hexagonal2": "hex2",
    "hexagonal_2": "hex2",
}

# pixels per lattice unit, tuned per type
SPREAD = {
    LatticeType.SIMPLE_CUBIC: 10,
    LatticeType.BCC: 13,
    LatticeType.FCC: 18,
    LatticeType.HEX1: 14,
    LatticeType.HEX2: 10,
}

# conventional-cell bases in units of a
CUBIC_BASIS = {
    LatticeType.SIMPLE_CUBIC: np.array([[0.0, 0.0, 0.0]]),
    LatticeType.BCC: np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]),
    LatticeType.FCC: np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]]),
}


def spread_for(lattice: LatticeType) -> int:
    return SPREAD[LatticeType(lattice)]


@dataclass(frozen=True)
class OrientationAngles:
    """Raw angle draws in [0, 1]; the effective angles are derived from them."""

    alpha_raw: float = 0.0
    theta_raw: float = 0.0
    phi_raw: float = 0.0

    def __post_init__(self):
        for name in ("alpha_raw", "theta_raw", "phi_raw"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    @property
    def alpha(self) -> float:
        """Tilt of the cutting plane, at most pi/3."""
        return self.alpha_raw * math.pi / 3

    @property
    def theta(self) -> float:
        """Azimuth of the tilt direction."""
        return self.theta_raw * math.pi / 3

    @property
    def phi(self) -> float:
        """Final in-plane rotation."""
        return self.phi_raw * math.pi

    @classmethod
    def random(cls, gen: np.random.Generator) -> OrientationAngles:
        alpha, theta, phi = gen.random(3)
        return cls(float(alpha), float(theta), float(phi))


@dataclass(frozen=True)
class LatticeSpec:
    lattice: LatticeType
    a: float = 1.0
    angles: OrientationAngles = field(default_factory=OrientationAngles)
    extent: int | None = None  # None: chosen at render time to overfill the canvas
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lattice", LatticeType(self.lattice))
        if not self.a > 0:
            raise ValueError(f"lattice constant must be positive, got {self.a}")
        if self.extent is not None and self.extent < 1:
            raise ValueError(f"extent must be >= 1, got {self.extent}")

    @classmethod
    def random(cls, lattice: LatticeType | str, seed: int, a: float = 1.0, extent: int | None = None) -> LatticeSpec:
        """Spec with orientation angles drawn from the seed's angle substream."""
        angles = OrientationAngles.random(_rng.substream(seed, _rng.ANGLES))
        lattice = LatticeType.parse(lattice) if isinstance(lattice, str) else lattice
        return cls(lattice=lattice, a=a, angles=angles, extent=extent, seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lattice"] = self.lattice.value
        return d


class AtomSite(NamedTuple):
    x: float
    y: float
    z: float


class PlaneProjection(NamedTuple):
    proj: np.ndarray  # component of the point vector along the plane normal
    dist: float
    proj_x: float
    proj_y: float


class ProjectedAtom(NamedTuple):
    u: float
    v: float
    dist: float
    gain: float = 1.0


@dataclass
class Atoms:
    """Projected atoms as parallel arrays.

    ``gain`` is a per-atom brightness multiplier (1 unless jittered).
    """

    u: np.ndarray
    v: np.ndarray
    dist: np.ndarray
    gain: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.dist = np.asarray(self.dist, dtype=np.float64)
        self.gain = np.broadcast_to(np.asarray(self.gain, dtype=np.float64), self.u.shape).copy()
        if not (self.u.shape == self.v.shape == self.dist.shape):
            raise ValueError("atom coordinate arrays must share one shape")
        if np.any(self.dist < 0):
            raise ValueError("atom distances must be non-negative")

    def __len__(self) -> int:
        return self.u.size

    def __getitem__(self, i: int) -> ProjectedAtom:
        return ProjectedAtom(float(self.u[i]), float(self.v[i]), float(self.dist[i]), float(self.gain[i]))

    @classmethod
    def from_list(cls, atoms: list[ProjectedAtom] | list[tuple]) -> Atoms:
        if len(atoms) == 0:
            return cls.empty()
        rows = [ProjectedAtom(*a) for a in atoms]
        return cls(
            np.array([r.u for r in rows]),
            np.array([r.v for r in rows]),
            np.array([r.dist for r in rows]),
            np.array([r.gain for r in rows]),
        )

    @classmethod
    def empty(cls) -> Atoms:
        z = np.zeros(0)
        return cls(z, z, z, z)


# ---------------------------------------------------------------- site grids


def _check_grid_args(a: float, extent: int) -> None:
    if not a > 0:
        raise ValueError(f"lattice constant must be positive, got {a}")
    if extent < 0:
        raise ValueError(f"extent must be non-negative, got {extent}")


def _hex_rows(a: float, extent: int, row_spacing: float) -> np.ndarray:
    ks = np.arange(-extent, extent + 1)
    js = np.arange(-extent, extent + 1)
    k, j = np.meshgrid(ks, js, indexing="ij")
    x = j * a + (k % 2) * (a / 2)
    y = k * row_spacing
    return np.stack([x.ravel(), y.ravel()], axis=1).astype(np.float64)


def hex1_grid(a: float, extent: int) -> np.ndarray:
    """Staggered rows 3a/2 apart, sites a apart, odd rows shifted by a/2.

    Returns an (n, 2) array of (x, y), row by row from k = -extent.
    """
    _check_grid_args(a, extent)
    return _hex_rows(a, extent, 1.5 * a)


def hex2_grid(a: float, extent: int) -> np.ndarray:
    """Same staggering as :func:`hex1_grid` with rows spaced 2a apart."""
    _check_grid_args(a, extent)
    return _hex_rows(a, extent, 2.0 * a)


def cubic_grid(lattice: LatticeType, a: float, extent: int) -> np.ndarray:
    """One-cell-thick slab of conventional cells; returns (n, 3) of (x, y, z0).

    Cells are indexed i, j in [-extent, extent]; each contributes its basis
    sites offset by (i*a, j*a, 0).
    """
    lattice = LatticeType(lattice)
    if not lattice.is_cubic:
        raise ValueError(f"{lattice.value} is not a cubic lattice")
    _check_grid_args(a, extent)
    cells = np.arange(-extent, extent + 1)
    i, j = np.meshgrid(cells, cells, indexing="ij")
    origins = np.stack([i.ravel(), j.ravel(), np.zeros(i.size)], axis=1)
    basis = CUBIC_BASIS[lattice]
    sites = (origins[:, None, :] + basis[None, :, :]).reshape(-1, 3)
    return sites * a


def lattice_sites(lattice: LatticeType, a: float, extent: int) -> np.ndarray:
    """(n, 3) sites (x, y, z0) for any lattice type; hexagonal sites have z0 = 0."""
    lattice = LatticeType(lattice)
    if lattice.is_cubic:
        return cubic_grid(lattice, a, extent)
    xy = hex1_grid(a, extent) if lattice is LatticeType.HEX1 else hex2_grid(a, extent)
    return np.column_stack([xy, np.zeros(len(xy))])


# ---------------------------------------------------------------- geometry


def tilt_height(x, y, angles: OrientationAngles):
    """Height of the tilted cutting plane above (x, y)."""
    return math.tan(angles.alpha) * (np.multiply(x, math.cos(angles.theta)) + np.multiply(y, math.sin(angles.theta)))


def plane_normal(angles: OrientationAngles) -> np.ndarray:
    t = math.tan(angles.alpha)
    return np.array([t * math.cos(angles.theta), t * math.sin(angles.theta), -1.0])


def in_plane_basis(angles: OrientationAngles) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (e1, e2) spanning the cutting plane.

    e1 points up the slope along the tilt azimuth; e2 = N x e1.
    """
    n = plane_normal(angles)
    t = math.tan(angles.alpha)
    e1 = np.array([math.cos(angles.theta), math.sin(angles.theta), t])
    e1 = e1 - (e1 @ n) / (n @ n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    e2 /= np.linalg.norm(e2)
    return e1, e2


def layer_height(z, use_floor: bool = True, offset: float = 0.0, spacing: float = 1.0):
    """Height of the atom layer beneath the plane at height z.

    With the defaults this is ``floor(z)``; cubic sublattices pass their own
    offset and the cell height as spacing.
    """
    if not use_floor:
        return np.asarray(z, dtype=np.float64)
    return offset + spacing * np.floor((np.asarray(z, dtype=np.float64) - offset) / spacing)


def project_points(points: np.ndarray, angles: OrientationAngles):
    """Split (n, 3) point vectors into normal component and in-plane coordinates.

    Returns ``(proj, dist, proj_x, proj_y)`` with ``proj`` of shape (n, 3).
    """
    n = plane_normal(angles)
    coeff = (points @ n) / (n @ n)
    proj = coeff[:, None] * n[None, :]
    dist = np.linalg.norm(proj, axis=1)
    rest = points - proj
    e1, e2 = in_plane_basis(angles)
    return proj, dist, rest @ e1, rest @ e2


def project_to_plane(
    site: AtomSite,
    angles: OrientationAngles,
    use_floor: bool = True,
    layer_offset: float = 0.0,
    layer_spacing: float = 1.0,
) -> PlaneProjection:
    x, y, z = site
    h = float(layer_height(z, use_floor, layer_offset, layer_spacing))
    points = np.array([[0.0 - x, 0.0 - y, 0.0 - h]])
    proj, dist, px, py = project_points(points, angles)
    return PlaneProjection(proj[0], float(dist[0]), float(px[0]), float(py[0]))


def rotate2d(proj_x, proj_y, phi_raw: float):
    c = math.cos(phi_raw * math.pi)
    s = math.sin(phi_raw * math.pi)
    return c * np.asarray(proj_x) + s * np.asarray(proj_y), -s * np.asarray(proj_x) + c * np.asarray(proj_y)


def place_atoms(spec: LatticeSpec, extent: int, use_floor: bool = True) -> Atoms:
    """Generate, lift, project and rotate every site of ``spec``.

    Every site, whatever its sublattice height ``z0``, is lifted to the
    layer ``floor(z)`` beneath the cutting plane, so an untilted plane
    puts all atoms at distance zero.
    """
    sites = lattice_sites(spec.lattice, spec.a, extent)
    x, y = sites[:, 0], sites[:, 1]
    z = tilt_height(x, y, spec.angles)
    points = -np.column_stack([x, y, layer_height(z, use_floor)])
    _, dist, px, py = project_points(points, spec.angles)
    u, v = rotate2d(px, py, spec.angles.phi_raw)
    return Atoms(u, v, dist, np.ones_like(u))
