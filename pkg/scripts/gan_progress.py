"""Train one slice GAN on desk phantoms and watch it learn.

Prints the fixed-noise snapshot's correlation with the mean training slice at
every snapshot epoch, the generated-vs-real mean intensity and the
discriminator's real/fake accuracy, and writes the snapshots as PGM images.

    python3 scripts/gan_progress.py --epochs 2000 --out runs/gan_progress
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from gancnn.config import desk_preset
from gancnn.gan import discriminator_accuracy, pearson, train_slice_gan, write_snapshots
from gancnn.volume import make_phantom, preprocess


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=2000)
    ap.add_argument("--slices", type=int, default=200, help="number of phantoms (one slice each)")
    ap.add_argument("--depth", type=int, default=11, help="band position to train on")
    ap.add_argument("--label", default="normal", choices=["normal", "bipolar"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/gan_progress")
    args = ap.parse_args()

    desk = desk_preset()
    slices = np.stack([preprocess(make_phantom(s, args.label, desk.phantom.dims)).slices[args.depth]
                       for s in range(args.slices)])
    marks = tuple(e for e in (1, 50, 200, 500, 1000, 2000, 5000, 10000) if e <= args.epochs)
    if marks[-1] != args.epochs:
        marks += (args.epochs,)
    cfg = replace(desk.gan, max_epochs=args.epochs, early_stop_epoch=None, snapshot_epochs=marks, seed=args.seed)

    start = time.perf_counter()
    pair = train_slice_gan(slices, cfg, args.label, args.depth)
    elapsed = time.perf_counter() - start

    target = slices.mean(axis=0)
    corr = {e: pearson(img, target) for e, img in sorted(pair.snapshots.items())}
    fake = pair.generate(np.random.default_rng(args.seed).standard_normal((256, cfg.noise_dim)))
    print(f"trained {args.epochs} epochs on {len(slices)} slices in {elapsed:.1f}s")
    for e, c in corr.items():
        print(f"  epoch {e:>6}: correlation with mean slice {c:+.3f}")
    print(f"spearman trend over snapshots: {spearmanr(list(corr), list(corr.values())).statistic:+.3f}")
    print(f"mean intensity: generated {fake.mean():+.4f} real {slices.mean():+.4f}")
    print(f"discriminator accuracy: {discriminator_accuracy(pair, slices, n=128, seed=1):.3f}")
    paths = write_snapshots(pair, Path(args.out))
    print(f"wrote {len(paths)} snapshots under {args.out}")


if __name__ == "__main__":
    main()
