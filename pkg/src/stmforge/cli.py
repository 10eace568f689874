"""Command-line interface: ``stmforge simulate | dataset | train | eval``.

Each command resolves its configuration from built-in defaults, then an
optional ``--config`` file (JSON, ``key = value`` lines, or a previous run's
manifest), then explicit command-line flags. The resolved configuration is
written to ``manifest.json`` next to the outputs, so passing that manifest
back through ``--config`` replays the run.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as _rng
from .image import SimImage, load_image, save_image, write_pgm
from .lattice import LatticeType
from .metrics import evaluate, pca_project, write_metrics_csv, write_pca_csv
from .models import (
    DISPLAY_NAMES,
    INPUT_SIZE,
    Autoencoder,
    TrainingAborted,
    build_model,
    builtin_configs,
    get_config,
    parse_arch,
    train,
)
from .nn import NonFiniteError
from .noise import DEFAULT_NOISE, NoiseParams
from .patches import (
    DatasetSplit,
    DegenerateImageError,
    PatchSet,
    extract_patches,
    load_patch_set,
    normalize,
    save_patch_set,
    split_patches,
)
from .render import DEFAULT_LATTICE_CONSTANT, PSF_SIGMA, simulate_series

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.json"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- defaults

SIMULATE_DEFAULTS = {
    "lattice": "all",
    "count": 1,
    "seed": 0,
    "a": DEFAULT_LATTICE_CONSTANT,
    "psf_sigma": PSF_SIGMA,
    "brightness_width": None,
    "use_floor": True,
    "size": 256,
    **DEFAULT_NOISE,
    "out": "images",
}

DATASET_DEFAULTS = {
    "images": "images",
    "patch": 17,
    "stride": 4,
    "patches_per_image": None,
    "seed": 0,
    "out": "dataset",
}

TRAIN_DEFAULTS = {
    "data": "dataset",
    "arch": "cae-a",
    "config": "baseline",
    "lr": None,
    "batch": None,
    "epochs": None,
    "patches_per_image": None,
    "lr_decay": None,
    "split": 0.9,
    "augment": True,
    "seed": 0,
    "out": "run",
}

EVAL_DEFAULTS = {
    "model": "run/model.stmw",
    "data": "run/val.stmp",
    "config_label": None,
    "samples": 8,
    "out": "eval",
}

DEFAULTS = {"simulate": SIMULATE_DEFAULTS, "dataset": DATASET_DEFAULTS, "train": TRAIN_DEFAULTS, "eval": EVAL_DEFAULTS}


# ---------------------------------------------------------------- config files


def _parse_scalar(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.lower()
        if low in ("true", "yes", "on"):
            return True
        if low in ("false", "no", "off"):
            return False
        if low in ("none", "null", ""):
            return None
        return text.strip("'\"")


def read_config_file(path, command: str) -> dict:
    """Flat key/value mapping from JSON, ``key = value`` text, or a manifest."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if isinstance(doc.get("config"), dict) and "command" in doc:
            if doc["command"] != command:
                raise ConfigError(f"{path} is a manifest for '{doc['command']}', not '{command}'")
            doc = doc["config"]
    else:
        doc = {}
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            sep = "=" if "=" in line else ":" if ":" in line else None
            if sep is None:
                raise ConfigError(f"{path}:{n}: expected 'key = value', got {line!r}")
            key, value = line.split(sep, 1)
            doc[key.strip().replace("-", "_")] = _parse_scalar(value)
    unknown = sorted(set(doc) - set(DEFAULTS[command]))
    if unknown:
        raise ConfigError(f"{path}: unknown {command} option(s): {', '.join(unknown)}")
    return doc


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    source = getattr(args, "config_file", None)
    if source and command == "train" and not Path(source).exists():
        # `train --config baseline` names a built-in configuration
        try:
            get_config(source)
        except ValueError as exc:
            raise ConfigError(f"{source!r} is neither a config file nor a built-in configuration: {exc}") from None
        cfg["config"] = source
        source = None
    if source:
        cfg.update(read_config_file(source, command))
    for key in DEFAULTS[command]:
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    return cfg


# ---------------------------------------------------------------- manifest


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, seeds: dict, artifacts: list[Path], started: float, extra: dict | None = None) -> Path:
    doc = {
        "command": command,
        "config": cfg,
        "seeds": seeds,
        "artifacts": [{"path": str(p.relative_to(out)), "sha256": sha256(p)} for p in sorted(artifacts)],
        "version": __version__,
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(timespec="seconds"),
        "wall_seconds": round(time.time() - started, 3),
        **(extra or {}),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- simulate


def _lattices(value) -> list[LatticeType]:
    names = value if isinstance(value, list) else str(value).split(",")
    if len(names) == 1 and names[0].strip().lower() == "all":
        return list(LatticeType)
    try:
        return [LatticeType.parse(n) for n in names]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(cfg: dict) -> int:
    started = time.time()
    lattices = _lattices(cfg["lattice"])
    try:
        count, seed = int(cfg["count"]), int(cfg["seed"])
        noise_kw = {k: float(cfg[k]) for k in DEFAULT_NOISE}
        NoiseParams(**noise_kw)
        a = float(cfg["a"])
        if count < 1:
            raise ValueError(f"count must be >= 1, got {count}")
        if not a > 0:
            raise ValueError(f"lattice constant must be positive, got {a}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(cfg)

    artifacts, seeds = [], {}
    for lattice in lattices:
        series = simulate_series(
            lattice,
            count,
            seed,
            a=a,
            noise=noise_kw,
            psf_sigma=float(cfg["psf_sigma"]),
            brightness_width=None if cfg["brightness_width"] is None else float(cfg["brightness_width"]),
            use_floor=bool(cfg["use_floor"]),
            size=int(cfg["size"]),
        )
        for stem, img in series:
            artifacts += save_image(img, out / stem)
            seeds[stem] = {"lattice": img.meta["lattice"]["seed"], "noise": img.meta["noise"]["seed"]}
    write_manifest(out, "simulate", cfg, {"base": seed, "images": seeds}, artifacts, started)
    _log(f"wrote {len(lattices) * count} images to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- dataset


def _image_files(folder: Path) -> list[Path]:
    files = sorted(p for p in folder.glob("*.json") if p.name != MANIFEST and p.with_suffix(".f32").exists())
    covered = {p.stem for p in files}
    files += sorted(p for p in folder.glob("*.pgm") if p.stem not in covered)
    return sorted(files, key=lambda p: p.stem)


def _lattice_label(img: SimImage) -> str:
    lat = img.meta.get("lattice")
    if isinstance(lat, dict):
        return str(lat.get("lattice", "unknown"))
    return str(lat) if lat else "unknown"


def cmd_dataset(cfg: dict) -> int:
    started = time.time()
    folder = Path(cfg["images"])
    if not folder.is_dir():
        raise DataError(f"image directory {folder} does not exist")
    files = _image_files(folder)
    if not files:
        raise DataError(f"no images found in {folder}")
    try:
        patch, stride, seed = int(cfg["patch"]), int(cfg["stride"]), int(cfg["seed"])
        per_image = None if cfg["patches_per_image"] is None else int(cfg["patches_per_image"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if patch < 1 or stride < 1 or (per_image is not None and per_image < 1):
        raise ConfigError("patch, stride and patches_per_image must be positive")
    out = _out_dir(cfg)

    values, sources, counts, labels, names, skipped = [], [], {}, {}, {}, []
    for img_id, path in enumerate(files):
        try:
            img = load_image(path)
            tiles, origins = extract_patches(normalize(img.pixels), patch, stride)
        except DegenerateImageError as exc:
            skipped.append({"file": path.name, "reason": str(exc)})
            _log(f"skipping {path.name}: {exc}")
            continue
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"{path}: {exc}") from None
        if per_image is not None:
            if per_image > len(tiles):
                raise DataError(f"{path.name}: {per_image} patches requested but only {len(tiles)} available")
            pick = np.sort(_rng.substream(seed, _rng.SUBSAMPLE, img_id).choice(len(tiles), per_image, replace=False))
            tiles, origins = tiles[pick], origins[pick]
        values.append(tiles.astype(np.float32))
        sources.append(np.column_stack([np.full(len(tiles), img_id), origins]))
        counts[str(img_id)] = len(tiles)
        labels[str(img_id)] = _lattice_label(img)
        names[str(img_id)] = path.stem
    if not values:
        raise DataError(f"every image in {folder} was degenerate; nothing to write")

    patches = PatchSet(np.concatenate(values), np.concatenate(sources).astype(np.int64))
    meta = {"labels": labels, "images": names, "per_image": counts, "stride": stride}
    archive, side = save_patch_set(patches, out / "patches.stmp", meta)
    write_manifest(out, "dataset", cfg, {"base": seed}, [archive, side], started, {"per_image": counts, "skipped": skipped})
    _log(f"wrote {len(patches)} patches from {len(counts)} images to {archive}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def _archive_path(value) -> Path:
    path = Path(value)
    if path.is_dir():
        path = path / "patches.stmp"
    if not path.exists():
        raise DataError(f"patch archive {path} not found")
    return path


def _load_patches(value) -> tuple[PatchSet, dict]:
    path = _archive_path(value)
    try:
        return load_patch_set(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _subsample_per_image(patches: PatchSet, per_image: int, seed: int) -> PatchSet:
    keep = []
    for img_id in np.unique(patches.source[:, 0]):
        rows = np.flatnonzero(patches.source[:, 0] == img_id)
        if len(rows) < per_image:
            raise DataError(f"image {img_id}: config needs {per_image} patches per image, archive holds {len(rows)}")
        if len(rows) > per_image:
            rows = np.sort(_rng.substream(seed, _rng.SUBSAMPLE, int(img_id)).choice(rows, per_image, replace=False))
        keep.append(rows)
    return patches.subset(np.concatenate(keep))


def _train_config(cfg: dict):
    try:
        base = get_config(str(cfg["config"]))
        overrides = {k: cfg[k] for k in ("lr", "batch", "epochs", "patches_per_image", "lr_decay") if cfg[k] is not None}
        for k in ("batch", "epochs", "patches_per_image"):
            if k in overrides:
                overrides[k] = int(overrides[k])
        if "lr" in overrides:
            overrides["lr"] = float(overrides["lr"])
        if "lr_decay" in overrides:
            overrides["lr_decay"] = bool(overrides["lr_decay"])
        return base.with_overrides(**overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(cfg: dict) -> int:
    started = time.time()
    try:
        arch = parse_arch(str(cfg["arch"]))
        split, seed = float(cfg["split"]), int(cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    tcfg = _train_config(cfg)
    patches, meta = _load_patches(cfg["data"])
    if patches.patch_size != INPUT_SIZE[arch]:
        raise ConfigError(f"{arch} takes {INPUT_SIZE[arch]}x{INPUT_SIZE[arch]} patches but the archive holds {patches.patch_size}x{patches.patch_size}")
    patches = _subsample_per_image(patches, tcfg.patches_per_image, seed)
    try:
        train_set, val_set = split_patches(patches, split, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    labels = meta.get("labels", {})
    data = DatasetSplit(train_set, val_set, split, seed, labels)
    out = _out_dir(cfg)

    model = build_model(arch, seed=seed)
    _log(f"training {arch} with {tcfg.name}: {len(train_set)} train / {len(val_set)} val patches")

    def report(rec):
        _log(f"epoch {rec.epoch:4d}  train {rec.train_loss:.6f}  val {rec.val_loss:.6f}  ({rec.seconds:.1f}s)")

    try:
        log = train(model, data, tcfg, seed=seed, augment=bool(cfg["augment"]), on_epoch=report)
    except TrainingAborted as exc:
        exc.log.write_csv(out / "train_log.csv")
        raise
    ckpt = model.save(out / "model.stmw", {"train_config": tcfg.to_dict(), "seed": seed, "labels": labels})
    log.checkpoint = ckpt.name
    log.write_csv(out / "train_log.csv")
    val_meta = {"labels": labels, "images": meta.get("images", {}), "config": tcfg.name}
    val_paths = save_patch_set(val_set, out / "val.stmp", val_meta)
    write_manifest(
        out,
        "train",
        cfg,
        {"base": seed},
        [ckpt, *val_paths],
        started,
        {"logs": ["train_log.csv"], "train_config": tcfg.to_dict(), "final_val_loss": log.final_val_loss},
    )
    _log(f"final validation loss {log.final_val_loss:.6f}; checkpoint {ckpt}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _side_by_side(a: np.ndarray, b: np.ndarray, lo: float, hi: float) -> np.ndarray:
    gap = np.full((a.shape[0], 1), lo)
    return np.hstack([a, gap, b])


def cmd_eval(cfg: dict) -> int:
    started = time.time()
    model_path = Path(cfg["model"])
    if not model_path.exists():
        raise DataError(f"checkpoint {model_path} not found")
    try:
        model, header = Autoencoder.load(model_path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{model_path}: {exc}") from None
    patches, meta = _load_patches(cfg["data"])
    if patches.patch_size != model.input_size:
        raise ConfigError(f"model takes {model.input_size}x{model.input_size} patches, archive holds {patches.patch_size}x{patches.patch_size}")
    if len(patches) == 0:
        raise DataError("patch archive is empty")
    label = cfg["config_label"] or header.get("train_config", {}).get("name") or meta.get("config") or model.arch
    labels = {**header.get("labels", {}), **meta.get("labels", {})}
    lattice_of = np.array([labels.get(str(i), "unknown") for i in patches.source[:, 0]])
    out = _out_dir(cfg)

    records = []
    for lattice in sorted(set(lattice_of)):
        sel = lattice_of == lattice
        records.append(evaluate(model, patches.values[sel], lattice, label))
    if not all(math.isfinite(r.mse) and math.isfinite(r.ssim) for r in records):
        raise NonFiniteError("non-finite reconstruction metrics")
    artifacts = [out / "metrics.csv"]
    write_metrics_csv(records, artifacts[0])

    x = model.to_model_space(patches.values)
    latents = model.encode(x).astype(np.float64)
    if len(latents) >= 4:
        proj = pca_project(latents, 3)
        write_pca_csv(proj, lattice_of, patches.source[:, 0], out / "pca.csv")
        artifacts.append(out / "pca.csv")
    else:
        _log("fewer than 4 patches: skipping PCA")

    n = min(int(cfg["samples"]), len(x))
    recon_dir = out / "recon"
    recon_dir.mkdir(exist_ok=True)
    lo, hi = model.data_range
    if n > 0:
        pick = np.unique(np.linspace(0, len(x) - 1, n).round().astype(int))
        rec = model.reconstruct(x[pick])
        for j, (i, r) in enumerate(zip(pick, rec)):
            path = recon_dir / f"pair_{j:03d}_{lattice_of[i]}.pgm"
            write_pgm(path, _side_by_side(x[i], r, lo, hi), lo, hi)
            artifacts.append(path)
    write_manifest(out, "eval", cfg, {}, artifacts, started, {"records": [r.__dict__ for r in records]})
    for r in records:
        print(f"{r.lattice},{r.config},{r.mse:.6f},{r.ssim:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _add_common(p: argparse.ArgumentParser, config_help: str = "JSON, key=value text or a previous manifest") -> None:
    p.add_argument("--config", dest="config_file", metavar="FILE", help=config_help)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="BLAS thread cap (default: $STMFORGE_THREADS)")


def _bool(text: str) -> bool:
    value = _parse_scalar(text)
    if not isinstance(value, bool):
        raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stmforge", description="Simulated STM images and convolutional autoencoders.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    kw = dict(argument_default=argparse.SUPPRESS)

    p = sub.add_parser("simulate", help="render simulated STM images", **kw)
    _add_common(p)
    p.add_argument("--lattice", help="lattice name, comma list, or 'all'")
    p.add_argument("--count", type=int, help="images per lattice type")
    p.add_argument("--a", type=float, help="lattice constant")
    p.add_argument("--psf-sigma", dest="psf_sigma", type=float)
    p.add_argument("--brightness-width", dest="brightness_width", type=float)
    p.add_argument("--use-floor", dest="use_floor", type=_bool)
    p.add_argument("--size", type=int)
    for key in DEFAULT_NOISE:
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=float)

    p = sub.add_parser("dataset", help="cut normalized patches from images", **kw)
    _add_common(p)
    p.add_argument("--images", help="directory of simulated images")
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--patches-per-image", dest="patches_per_image", type=int)

    p = sub.add_parser("train", help="train an autoencoder", **kw)
    _add_common(p, "config file, previous manifest, or the name of a built-in training configuration")
    p.add_argument("--data", help="patch archive or dataset directory")
    p.add_argument("--arch", help="cae-a or cae-b")
    p.add_argument("--train-config", "--preset", dest="config", help="built-in training configuration name")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patches-per-image", dest="patches_per_image", type=int)
    p.add_argument("--lr-decay", dest="lr_decay", type=_bool)
    p.add_argument("--split", type=float, help="training fraction")
    p.add_argument("--augment", type=_bool)
    p.add_argument("--list-configs", action="store_true", default=False)

    p = sub.add_parser("eval", help="score a checkpoint on a patch archive", **kw)
    _add_common(p)
    p.add_argument("--model", help="checkpoint path")
    p.add_argument("--data", help="patch archive or dataset directory")
    p.add_argument("--label", dest="config_label", help="config label for the metrics table")
    p.add_argument("--samples", type=int, help="number of reconstruction pairs to write")
    return parser


def _threads(args) -> int | None:
    value = getattr(args, "threads", None)
    if value is None and os.environ.get("STMFORGE_THREADS"):
        try:
            value = int(os.environ["STMFORGE_THREADS"])
        except ValueError:
            raise ConfigError(f"STMFORGE_THREADS must be an integer, got {os.environ['STMFORGE_THREADS']!r}") from None
    if value is not None and value < 1:
        raise ConfigError(f"--threads must be >= 1, got {value}")
    return value


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def list_configs() -> str:
    lines = [f"{'name':<18} {'display name':<22} {'lr':>7} {'batch':>6} {'patches':>8} {'epochs':>7} decay"]
    for c in builtin_configs():
        lines.append(f"{c.name:<18} {DISPLAY_NAMES[c.name]:<22} {c.lr:>7g} {c.batch:>6} {c.patches_per_image:>8} {c.epochs:>7} {c.lr_decay}")
    return "\n".join(lines)


COMMANDS = {"simulate": cmd_simulate, "dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and args.list_configs:
        print(list_configs())
        return EXIT_OK
    try:
        threads = _threads(args)
        cfg = resolve_config(args.command, args)
        with _thread_limit(threads):
            return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    except DataError as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except NonFiniteError as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
