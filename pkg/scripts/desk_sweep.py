"""Augmentation-ratio sweep on desk-scale phantoms, without the CLI's artifact tree.

    python3 scripts/desk_sweep.py --gan-epochs 300 --ratios 0,0.25,0.5,0.75,1,3
"""
import argparse
import time
import warnings
from dataclasses import replace

from gancnn.config import desk_preset
from gancnn.gan import train_gan_bank
from gancnn.harness import AugmentationCountDeviation, SweepConfig, render_report, run_sweep, split_stacks
from gancnn.seeding import derive_seed
from gancnn.volume import make_phantom, preprocess


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gan-epochs", type=int, default=300)
    ap.add_argument("--classifier-epochs", type=int, default=None)
    ap.add_argument("--ratios", default="0,0.25,0.5,0.75,1,3")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--format", default="markdown", choices=["markdown", "csv"])
    args = ap.parse_args()

    cfg = desk_preset()
    t0 = time.perf_counter()
    stacks = [preprocess(make_phantom(derive_seed(args.seed, "phantom", label, i), label, cfg.phantom.dims),
                         cfg.preprocess.factor, cfg.preprocess.band, cfg.preprocess.depth, f"{label}-{i:03d}")
              for label, n in (("normal", cfg.phantom.n_normal), ("bipolar", cfg.phantom.n_bipolar))
              for i in range(n)]
    data = split_stacks(stacks, cfg.phantom.test_fraction, args.seed)
    ratios = tuple(float(r) for r in args.ratios.split(","))

    bank = None
    if any(r > 0 for r in ratios):
        marks = tuple(e for e in cfg.gan.snapshot_epochs if e <= args.gan_epochs) or (args.gan_epochs,)
        gan_cfg = replace(cfg.gan, max_epochs=args.gan_epochs, snapshot_epochs=marks, seed=args.seed)
        bank = train_gan_bank({c: data.by_class(c) for c in ("normal", "bipolar")}, gan_cfg, jobs=args.jobs)
        print(f"GAN bank ({len(bank.pairs)} pairs, {args.gan_epochs} epochs) in {time.perf_counter() - t0:.0f}s")

    clf = cfg.classifier_config()
    if args.classifier_epochs:
        clf = replace(clf, epochs=args.classifier_epochs)
    sweep = SweepConfig(ratios, cfg.sweep.folds, cfg.sweep.cross_validate, cfg.preprocess.classifier_size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AugmentationCountDeviation)
        report = run_sweep(data, bank, sweep, clf, seed=args.seed, jobs=args.jobs)
    print(render_report(report, args.format))
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
