"""Lattice by training-configuration sweep that writes one metrics table.

Every (lattice, config) cell gets its own simulated images, model and split,
all derived from --seed. The defaults are a reduced scale that finishes on a
laptop; pass --images 100 --full-patches to run the full protocol.

Example:
    python3 scripts/sweep.py --configs baseline lower_lr --epochs 20 --out sweep.csv
"""

import argparse
import time

from stmforge.lattice import LatticeType
from stmforge.metrics import evaluate, write_metrics_csv
from stmforge.models import build_model, builtin_configs, get_config, train
from stmforge.patches import build_dataset
from stmforge.render import simulate_series


def main() -> None:
    names = [c.name for c in builtin_configs()]
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lattices", nargs="+", default=[t.value for t in LatticeType])
    ap.add_argument("--configs", nargs="+", default=names, choices=names)
    ap.add_argument("--arch", default="cae-a")
    ap.add_argument("--images", type=int, default=10)
    ap.add_argument("--patches-per-image", type=int, default=300,
                    help="cap per image; ignored with --full-patches")
    ap.add_argument("--full-patches", action="store_true", help="use each config's own patches_per_image")
    ap.add_argument("--epochs", type=int, default=None, help="override every config's epoch count")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="sweep_metrics.csv")
    args = ap.parse_args()

    records = []
    for lat_name in args.lattices:
        lattice = LatticeType.parse(lat_name)
        images = [img for _, img in simulate_series(lattice, args.images, args.seed)]
        for cfg_name in args.configs:
            cfg = get_config(cfg_name)
            overrides = {}
            if not args.full_patches:
                overrides["patches_per_image"] = min(args.patches_per_image, cfg.patches_per_image)
            if args.epochs is not None:
                overrides["epochs"] = args.epochs
            cfg = cfg.with_overrides(**overrides)
            model = build_model(args.arch, seed=args.seed)
            data = build_dataset(images, model.input_size, 4, cfg.patches_per_image, 0.9, seed=args.seed)
            t0 = time.perf_counter()
            train(model, data, cfg, seed=args.seed)
            rec = evaluate(model, data.val, lattice.value, cfg.name)
            records.append(rec)
            print(f"{rec.lattice:13s} {rec.config:18s} mse={rec.mse:.4f} ssim={rec.ssim:.4f} "
                  f"({time.perf_counter() - t0:.0f}s)", flush=True)
            write_metrics_csv(records, args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
