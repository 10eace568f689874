"""Train one autoencoder on simulated images of a single lattice and report held-out MSE/SSIM.

Example:
    python3 scripts/desk_run.py --lattice simple_cubic --images 10 --epochs 30 --batch 256
"""

import argparse
import time

from stmforge.lattice import LatticeType
from stmforge.metrics import evaluate
from stmforge.models import build_model, get_config, train
from stmforge.patches import build_dataset
from stmforge.render import simulate_series


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lattice", default="simple_cubic")
    ap.add_argument("--images", type=int, default=10)
    ap.add_argument("--patches-per-image", type=int, default=300)
    ap.add_argument("--arch", default="cae-a")
    ap.add_argument("--config", default="baseline")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    lattice = LatticeType.parse(args.lattice)
    images = [img for _, img in simulate_series(lattice, args.images, args.seed)]
    model = build_model(args.arch, seed=args.seed)
    data = build_dataset(images, model.input_size, 4, args.patches_per_image, 0.9, seed=args.seed)
    cfg = get_config(args.config).with_overrides(
        epochs=args.epochs, batch=args.batch, patches_per_image=args.patches_per_image
    )
    t0 = time.perf_counter()
    log = train(
        model,
        data,
        cfg,
        seed=args.seed,
        on_epoch=lambda r: print(f"epoch {r.epoch:3d}  train {r.train_loss:.5f}  val {r.val_loss:.5f}", flush=True),
    )
    rec = evaluate(model, data.val, lattice.value, cfg.name)
    print(f"{lattice.value} {cfg.name}: mse={rec.mse:.4f} ssim={rec.ssim:.4f} "
          f"n={rec.n} epochs={len(log.records)} seconds={time.perf_counter() - t0:.1f}")


if __name__ == "__main__":
    main()
