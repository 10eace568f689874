"""Acceptance suite: ten end-to-end criteria at their stated tolerances.

Each check prints one ``[PASS]``/``[FAIL]`` line. Run with ``pytest -s`` to
see the lines inline, or as a script (``python3 tests/test_acceptance.py``)
to print only the summary.
"""
from __future__ import annotations

import csv
import io
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from gradcheck import check_layer

from stmforge.cli import main as cli_main
from stmforge.image import SimImage
from stmforge.lattice import (
    AtomSite,
    LatticeSpec,
    LatticeType,
    OrientationAngles,
    place_atoms,
    plane_normal,
    project_to_plane,
    rotate2d,
    tilt_height,
)
from stmforge.metrics import evaluate, pca_project, ssim_metric
from stmforge.models import TrainConfig, build_model, get_config, train
from stmforge.nn import (
    BatchNorm,
    ClippedReLU,
    Conv2D,
    Dense,
    Flatten,
    LeakyReLU,
    MaxPool2D,
    ReLU,
    Reshape,
    TConv2D,
)
from stmforge.noise import (
    NoiseParams,
    apply_noise_pipeline,
    gaussian_noise,
    poisson_noise,
    striation_noise,
)
from stmforge.patches import DatasetSplit, PatchSet, build_dataset, extract_patches
from stmforge.render import simulate_series

RESULTS: dict[int, str] = {}


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} :: {detail}"
    RESULTS[n] = line
    assert ok, line


# ---------------------------------------------------------------- 1


def test_criterion_01_patch_count():
    t0 = time.perf_counter()
    tiles, _ = extract_patches(np.random.default_rng(0).random((256, 256)), 17, 4)
    dt = time.perf_counter() - t0
    report(1, "256x256 image, P=17, stride 4 gives 3600 patches", len(tiles) == 3600 and dt < 1.0, f"{len(tiles)} patches in {dt:.3f}s")


# ---------------------------------------------------------------- 2

CAE_A_EXPECTED = [(17, 17, 16), (8, 8, 16), (8, 8, 9), (4, 4, 9), (144,), (10,), (144,), (4, 4, 9), (8, 8, 16), (17, 17, 1)]
CAE_B_EXPECTED = [(16, 16, 32), (8, 8, 32), (8, 8, 24), (4, 4, 24), (4, 4, 16), (2, 2, 16), (2, 2, 8), (1, 1, 8), (10,)]


def test_criterion_02_architecture_shapes():
    t0 = time.perf_counter()
    a = dict(build_model("cae-a").net.shapes())
    got_a = [a[n] for n in ("conv1", "pool1", "conv2", "pool2", "flatten", "latent", "dense2", "reshape", "tconv1", "tconv2")]
    b = build_model("cae-b").net
    bs = dict(b.shapes())
    got_b = [bs[n] for n in ("conv1", "pool1", "conv2", "pool2", "conv3", "pool3", "conv4", "pool4", "latent")]
    # walk every node: consecutive out/in shapes agree
    chained = all(l1.out_shape == l2.in_shape for net in (build_model("cae-a").net, b) for l1, l2 in zip(net.layers, net.layers[1:]))
    dt = time.perf_counter() - t0
    ok = got_a == CAE_A_EXPECTED and got_b == CAE_B_EXPECTED and b.output_shape == (16, 16, 1) and chained and dt < 1.0
    report(2, "CAE-A and CAE-B node shapes", ok, f"CAE-A {'ok' if got_a == CAE_A_EXPECTED else got_a}; CAE-B {'ok' if got_b == CAE_B_EXPECTED else got_b}; {dt:.3f}s")


# ---------------------------------------------------------------- 3


def _layer_cases(seed):
    gen = np.random.default_rng(seed)

    def kink_free(shape, kinks, lo=0.5, sd=1.0):
        x = gen.normal(lo, sd, shape)
        for _ in range(100):
            bad = np.zeros(shape, bool)
            for k in kinks:
                bad |= np.abs(x - k) < 1e-2
            if not bad.any():
                break
            x[bad] = gen.normal(lo, sd, bad.sum())
        return x

    pool_x = gen.permutation(2 * 6 * 6 * 2).reshape(2, 6, 6, 2) * 0.01
    return gen, [
        ("Conv2D", Conv2D(3, 3, 2, 1), (6, 6, 2), gen.normal(size=(2, 6, 6, 2))),
        ("TConv2D", TConv2D(2, 3, 2, 1, 1), (3, 3, 3), gen.normal(size=(2, 3, 3, 3))),
        ("Dense", Dense(4), (7,), gen.normal(size=(3, 7))),
        ("MaxPool2D", MaxPool2D(2), (6, 6, 2), pool_x.astype(np.float64)),
        ("ReLU", ReLU(), (3, 3, 2), kink_free((2, 3, 3, 2), [0.0])),
        ("LeakyReLU", LeakyReLU(0.01), (3, 3, 2), kink_free((2, 3, 3, 2), [0.0])),
        ("ClippedReLU", ClippedReLU(), (3, 3, 2), kink_free((2, 3, 3, 2), [0.0, 1.0])),
        ("BatchNorm", BatchNorm(), (3, 3, 2), gen.normal(1.0, 2.0, (4, 3, 3, 2))),
        ("Flatten", Flatten(), (2, 2, 3), gen.normal(size=(2, 2, 2, 3))),
        ("Reshape", Reshape((3, 4)), (12,), gen.normal(size=(2, 12))),
    ]


def test_criterion_03_gradients_and_adjoint():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(20):
        gen, cases = _layer_cases(seed)
        for name, layer, shape, x in cases:
            layer.build(shape, np.random.default_rng(seed + 100), np.float64)
            for p in layer.params.values():
                p += gen.normal(0, 0.1, p.shape)
            errs = check_layer(layer, x, gen, training=name == "BatchNorm")
            worst[name] = max(worst.get(name, 0.0), max(errs.values()))

    adj = 0.0
    for seed in range(20):
        gen = np.random.default_rng(seed)
        k, s, p, size, cin, cout = 3 + 2 * (seed % 2), 1 + seed % 3, seed % 2, 9, 2, 3
        conv = Conv2D(cout, k, s, p)
        conv.build((size, size, cin), gen, np.float64)
        ho = conv.out_shape[0]
        tconv = TConv2D(cin, k, s, p, (size + 2 * p - k) % s)
        tconv.build((ho, ho, cout), gen, np.float64)
        w = gen.normal(size=(k, k, cin, cout))
        conv.params["weight"][...] = w
        tconv.params["weight"][...] = w
        conv.params["bias"][...] = 0
        tconv.params["bias"][...] = 0
        x, y = gen.normal(size=(2, size, size, cin)), gen.normal(size=(2, ho, ho, cout))
        lhs, rhs = np.sum(conv.forward(x) * y), np.sum(x * tconv.forward(y))
        adj = max(adj, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))

    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and adj < 1e-10 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(3, "finite-difference gradients (20 seeds) and conv/tconv adjoint", ok, f"{detail}; adjoint {adj:.1e}; {dt:.1f}s")


# ---------------------------------------------------------------- 4


def _desk_dataset(seed=0):
    images = [img.pixels for _, img in simulate_series("simple_cubic", 10, seed)]
    return build_dataset(images, 17, 4, 300, 0.9, seed=seed)


@pytest.fixture(scope="module")
def desk_data():
    return _desk_dataset()


def test_criterion_04_desk_training(desk_data):
    t0 = time.perf_counter()
    desk_cfg = get_config("baseline").with_overrides(epochs=30, batch=256, patches_per_image=300)
    model = build_model("cae-a", seed=0)
    train(model, desk_data, desk_cfg, seed=0)
    desk = evaluate(model, desk_data.val.values, "simple_cubic", "baseline-30")

    full_cfg = get_config("baseline").with_overrides(patches_per_image=300)
    full_model = build_model("cae-a", seed=0)
    train(full_model, desk_data, full_cfg, seed=0)
    full = evaluate(full_model, desk_data.val.values, "simple_cubic", "baseline")
    dt = time.perf_counter() - t0

    ok = desk.mse <= 0.05 and desk.ssim >= 0.70 and full.mse <= 0.047
    report(
        4,
        "desk-scale CAE-A training on simple cubic",
        ok,
        f"30 ep/batch 256: MSE {desk.mse:.4f}, SSIM {desk.ssim:.4f}; 100 ep/batch 1024: MSE {full.mse:.4f}; {dt:.0f}s",
    )


# ---------------------------------------------------------------- 5


def test_criterion_05_overfit_one_patch(desk_data):
    t0 = time.perf_counter()
    patch = desk_data.train.values[0]
    x = np.repeat(patch[None], 16, axis=0)
    ps = PatchSet(x, np.zeros((16, 3), np.int64))
    data = DatasetSplit(ps, ps.subset(slice(0, 1)))
    # 16 copies per batch, one batch per epoch: 500 epochs are 500 Adam steps
    log = train(build_model("cae-a", seed=0), data, TrainConfig("overfit", 0.001, 16, 16, 500), seed=0, augment=False)
    dt = time.perf_counter() - t0
    mse = log.final_val_loss
    report(5, "CAE-A overfits one repeated patch in 500 steps", mse < 1e-3 and dt < 30, f"MSE {mse:.2e} in {dt:.1f}s")


# ---------------------------------------------------------------- 6


def test_criterion_06_noise_laws():
    gen = np.random.default_rng(0)
    img = SimImage(gen.random((256, 256)))
    ident = all(
        op(img, NoiseParams(seed=5)).pixels.tobytes() == img.pixels.tobytes()
        for op in (gaussian_noise, poisson_noise, striation_noise, apply_noise_pipeline)
    )
    n = 256 * 256
    gray = SimImage(np.full((256, 256), 0.5))
    g = gaussian_noise(gray, NoiseParams(gaussian_strength=0.05, seed=1)).pixels
    g_mean_ok = abs(g.mean() - 0.5) < 3 * 0.05 / np.sqrt(n)
    g_var_ok = abs(g.var(ddof=1) - 0.0025) < 3 * 0.0025 * np.sqrt(2 / (n - 1))
    p = poisson_noise(gray, NoiseParams(poisson_strength=2.55, seed=2)).pixels  # S = 100
    lam = 50.0
    p_mean_ok = abs(p.mean() - 0.5) < 3 * np.sqrt(0.005 / n)
    p_var_ok = abs(p.var(ddof=1) - 0.005) < 3 * np.sqrt((lam + 2 * lam**2) / n) / 1e4
    ok = ident and g_mean_ok and g_var_ok and p_mean_ok and p_var_ok
    report(
        6,
        "noise identity at zero strength and Gaussian/Poisson statistics",
        ok,
        f"identity {ident}; gaussian mean {g.mean():.5f} var {g.var(ddof=1):.6f}; poisson mean {p.mean():.5f} var {p.var(ddof=1):.6f}",
    )


# ---------------------------------------------------------------- 7


def test_criterion_07_projection_geometry():
    gen = np.random.default_rng(0)
    flat = all(
        np.all(place_atoms(LatticeSpec(t, angles=OrientationAngles(0.0, gen.random(), gen.random())), extent=5).dist == 0)
        for t in LatticeType
    )
    x, y, phi = gen.normal(0, 10, 10_000), gen.normal(0, 10, 10_000), gen.random(10_000)
    rot = max(abs(np.hypot(*rotate2d(a, b, f)) / np.hypot(a, b) - 1) for a, b, f in zip(x, y, phi))
    orth = 0.0
    for _ in range(1000):
        ang = OrientationAngles(*gen.random(3))
        p1, p2 = gen.normal(0, 10, 2), gen.normal(0, 10, 2)
        d = np.array([*(p2 - p1), tilt_height(*p2, ang) - tilt_height(*p1, ang)])
        n = plane_normal(ang)
        orth = max(orth, abs(d @ n) / (np.linalg.norm(d) * np.linalg.norm(n)))
    ang = OrientationAngles(0.5, 0.0, 0.0)
    res = project_to_plane(AtomSite(1.0, 0.0, tilt_height(1.0, 0.0, ang)), ang)
    worked = np.allclose(res.proj, [-0.25, 0.0, 0.43301], atol=1e-5) and abs(res.dist - 0.5) < 1e-5
    ok = flat and rot < 1e-12 and orth < 1e-12 and worked
    report(
        7,
        "projection geometry",
        ok,
        f"alpha=0 flat {flat}; rotate2d {rot:.1e}; normal {orth:.1e}; proj {np.round(res.proj, 5).tolist()} dist {res.dist:.5f}",
    )


# ---------------------------------------------------------------- 8


def _ssim_reference(a, b):
    """Direct double sum over an explicit 11x11 window, symmetric padding."""
    a, b = (a + 1) / 2, (b + 1) / 2
    t = np.arange(-5, 6)
    g = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / 4.5)
    g /= g.sum()
    pa, pb = np.pad(a, 5, mode="symmetric"), np.pad(b, 5, mode="symmetric")
    vals = []
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa, wb = pa[i : i + 11, j : j + 11], pb[i : i + 11, j : j + 11]
            ma, mb = np.sum(g * wa), np.sum(g * wb)
            va, vb = np.sum(g * (wa - ma) ** 2), np.sum(g * (wb - mb) ** 2)
            cov = np.sum(g * (wa - ma) * (wb - mb))
            vals.append((2 * ma * mb + 1e-4) * (2 * cov + 9e-4) / ((ma**2 + mb**2 + 1e-4) * (va + vb + 9e-4)))
    return float(np.mean(vals))


def test_criterion_08_ssim_oracle():
    gen = np.random.default_rng(0)
    worst, self_one = 0.0, True
    for _ in range(100):
        a = np.clip(gen.normal(0, 0.5, (17, 17)), -1, 1)
        b = np.clip(a + gen.normal(0, gen.uniform(0.01, 1), a.shape), -1, 1)
        worst = max(worst, abs(ssim_metric(a, b) - _ssim_reference(a, b)))
        self_one &= ssim_metric(a, a) == 1.0
    report(8, "SSIM matches an independent reference on 100 pairs", worst < 1e-6 and self_one, f"max diff {worst:.1e}; ssim(a,a)==1 {self_one}")


# ---------------------------------------------------------------- 9


def _artifact_bytes(folder: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(folder.rglob("*")):
        if not p.is_file() or p.name == "manifest.json":
            continue
        data = p.read_bytes()
        if p.name == "train_log.csv":  # the seconds column is wall time
            rows = list(csv.reader(io.StringIO(data.decode())))
            data = "\n".join(",".join(r[:3]) for r in rows).encode()
        out[str(p.relative_to(folder))] = data
    return out


def test_criterion_09_cli_determinism(tmp_path):
    steps = [
        ("simulate", ["--lattice", "all", "--count", "1", "--seed", "7"]),
        ("dataset", ["--images", "{root}/simulate", "--patches-per-image", "200", "--seed", "3"]),
        ("train", ["--data", "{root}/dataset", "--config", "baseline", "--epochs", "2", "--batch", "128", "--patches-per-image", "200"]),
        ("eval", ["--model", "{root}/train/model.stmw", "--data", "{root}/train/val.stmp"]),
    ]
    same, codes = {}, []
    for run in ("a", "b"):
        root = tmp_path / run
        for cmd, args in steps:
            if run == "a":
                argv = [cmd, *[s.format(root=root) for s in args], "--threads", "1", "--out", str(root / cmd)]
            else:  # replay: only the manifest and a fresh output directory
                argv = [cmd, "--config", str(tmp_path / "a" / cmd / "manifest.json"), "--threads", "1", "--out", str(root / cmd)]
            codes.append(cli_main(argv))
    for cmd, _ in steps:
        a, b = _artifact_bytes(tmp_path / "a" / cmd), _artifact_bytes(tmp_path / "b" / cmd)
        same[cmd] = len(a) > 0 and a == b
    ok = all(c == 0 for c in codes) and all(same.values())
    report(9, "CLI reruns from the manifest are byte-identical (--threads 1)", ok, f"exit codes {codes}; identical {same}")


# ---------------------------------------------------------------- 10


def test_criterion_10_pca():
    gen = np.random.default_rng(0)
    x = gen.normal(size=(500, 10)) @ gen.normal(size=(10, 10))
    proj = pca_project(x, 3)
    orth = float(np.max(np.abs(proj.components @ proj.components.T - np.eye(3))))
    desc = bool(np.all(np.diff(proj.explained_variance) <= 0))
    r1 = pca_project(gen.normal(size=(100, 1)) * gen.normal(size=10) + 1.0, 3).explained_variance
    rank1 = r1[0] > 0 and np.all(r1[1:] < 1e-10 * r1[0])
    report(10, "PCA orthonormality, ordering and rank-1 collapse", orth < 1e-10 and desc and rank1, f"orthonormality {orth:.1e}; descending {desc}; rank-1 variances {np.array2string(r1, precision=3)}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
