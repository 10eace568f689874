"""Reconstruction metrics (MSE, SSIM), per-lattice aggregation and PCA of
latent vectors.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def mse_metric(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.square(a - b)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _blur(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # 'reflect' mirrors about the edge including the edge pixel (d c b a | a b c d)
    return correlate1d(correlate1d(x, w, axis=-1, mode="reflect"), w, axis=-2, mode="reflect")


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """Local SSIM at every pixel over the last two axes.

    Inputs are mapped from ``data_range`` onto [0, 1] first, so L = 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    lo, hi = data_range
    a = (a - lo) / (hi - lo)
    b = (b - lo) / (hi - lo)
    w = gaussian_window()
    c1, c2 = K1**2, K2**2
    mu_a, mu_b = _blur(a, w), _blur(b, w)
    var_a = _blur(a * a, w) - mu_a * mu_a
    var_b = _blur(b * b, w) - mu_b * mu_b
    cov = _blur(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim_metric(a: np.ndarray, b: np.ndarray, data_range: tuple[float, float] = (-1.0, 1.0)) -> float:
    return float(ssim_map(a, b, data_range).mean())


def ssim_batch(a: np.ndarray, b: np.ndarray, data_range: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """Per-patch mean SSIM for stacks of shape (N, P, P)."""
    return ssim_map(a, b, data_range).mean(axis=(-2, -1))


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class MetricRecord:
    lattice: str
    config: str
    mse: float
    ssim: float
    n: int = 0


def evaluate(model, patches: np.ndarray, lattice: str, config: str) -> MetricRecord:
    """Mean MSE and SSIM between normalized patches and their reconstructions.

    Both are measured in the model's own value range.
    """
    values = np.asarray(getattr(patches, "values", patches))
    if len(values) == 0:
        raise ValueError("cannot evaluate on an empty patch set")
    target = model.to_model_space(values)
    rec = model.reconstruct(target).astype(np.float64)
    target = target.astype(np.float64)
    mse = np.mean(np.square(rec - target), axis=(1, 2))
    ssim = ssim_batch(target, rec, model.data_range)
    return MetricRecord(str(lattice), str(config), float(np.mean(mse)), float(np.mean(ssim)), len(values))


def write_metrics_csv(records: list[MetricRecord], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lattice", "config", "avg_mse", "avg_ssim"])
        for r in records:
            w.writerow([r.lattice, r.config, f"{r.mse:.6f}", f"{r.ssim:.6f}"])


# ---------------------------------------------------------------- PCA


@dataclass
class PcaProjection:
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray  # (k,), descending
    mean: np.ndarray
    points: np.ndarray  # (n, k)

    def back_project(self) -> np.ndarray:
        return self.points @ self.components + self.mean


def pca_project(latents: np.ndarray, n_components: int = 3) -> PcaProjection:
    """Top principal directions from the eigen-decomposition of the sample covariance.

    Each component's sign is fixed so its largest-magnitude entry is positive.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or len(x) < 4:
        raise ValueError(f"need at least 4 latent vectors, got shape {x.shape}")
    if x.shape[1] < n_components:
        raise ValueError(f"latent dimension {x.shape[1]} < {n_components} components")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T
    flip = np.sign(comps[np.arange(n_components), np.abs(comps).argmax(axis=1)])
    comps *= flip[:, None]
    return PcaProjection(comps, evals, mean, xc @ comps.T)


def write_pca_csv(proj: PcaProjection, lattices, image_ids, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["pc1", "pc2", "pc3", "lattice", "image_id"])
        for (p1, p2, p3), lat, img in zip(proj.points[:, :3], lattices, image_ids):
            w.writerow([f"{p1:.6f}", f"{p2:.6f}", f"{p3:.6f}", lat, int(img)])
