"""``gancnn`` command line: phantom -> preprocess -> train-gan -> synthesize -> classify -> sweep -> report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .blocks import checkpoint_bytes, load_checkpoint
from .classifier import CLASS_INDEX, predict_proba, to_sample, train_classifier
from .config import RunConfig, apply_overrides, dumps, load_config
from .errors import ConfigError, GanCnnError
from .gan import GanBank, GanPair, synthesize_stack, train_gan_bank, write_snapshots
from .harness import (
    ConfusionMatrix, SplitDataset, compute_metrics, read_experiment_log, render_report, run_sweep,
    split_stacks, write_experiment_log, write_predictions,
)
from .seeding import derive_seed
from .tensor import load_tensor, save_tensor
from .volume import ManifestRow, SliceStack, make_phantom, preprocess, read_manifest, read_nifti, write_manifest, write_nifti

log = logging.getLogger("gancnn")
OUT_ENV = "GANCNN_OUT"


class MissingInputError(GanCnnError):
    def __init__(self, path, hint=""):
        super().__init__(f"missing input: {path}" + (f" ({hint})" if hint else ""))
        self.path = path


# -- artifact helpers --------------------------------------------------------

def _write(path: Path, data: bytes | str, written: list):
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data)
    else:
        path.write_bytes(data)
    written.append(path)


def _require(path: Path, hint=""):
    if not path.exists():
        raise MissingInputError(path, hint)
    return path


def write_run_manifest(cfg: RunConfig, out: Path, command: str, written: list):
    echo = dumps(replace(cfg, out="."))
    text = f"# gancnn {__version__} reproducibility manifest\ncommand = \"{command}\"\nversion = \"{__version__}\"\n\n" + echo
    _write(out / "manifests" / f"{command}.toml", text, written)


def phantom_ids(cfg: RunConfig, count=None):
    n_n, n_b = cfg.phantom.n_normal, cfg.phantom.n_bipolar
    if count is not None:
        n_b = int(round(count * n_b / (n_n + n_b)))
        n_n = count - n_b
    return [("normal", i) for i in range(n_n)] + [("bipolar", i) for i in range(n_b)]


def cmd_phantom(cfg, out, args, written):
    rows = []
    for label, i in phantom_ids(cfg, args.count):
        sid = f"{label}-{i:03d}"
        vol = make_phantom(derive_seed(cfg.seed, "phantom", label, i), label, cfg.phantom.dims)
        (out / "phantoms").mkdir(parents=True, exist_ok=True)
        write_nifti(out / "phantoms" / f"{sid}.nii", vol)
        written.append(out / "phantoms" / f"{sid}.nii")
        rows.append(ManifestRow(f"{sid}.nii", label, "synthetic"))
    write_manifest(out / "phantoms" / "manifest.tsv", rows)
    written.append(out / "phantoms" / "manifest.tsv")


def _stack_meta(cfg):
    return {"band": cfg.preprocess.band, "factor": cfg.preprocess.factor}


def cmd_preprocess(cfg, out, args, written):
    manifest = Path(args.manifest) if getattr(args, "manifest", None) else out / "phantoms" / "manifest.tsv"
    _require(manifest, "run `gancnn phantom` first or pass --manifest")
    stacks = []
    for row in read_manifest(manifest):
        path = _require(manifest.parent / row.path)
        vol = read_nifti(path, label=row.label, provenance=row.provenance)
        sid = Path(row.path).stem
        stacks.append(preprocess(vol, cfg.preprocess.factor, cfg.preprocess.band, cfg.preprocess.depth, sid))
    split = split_stacks(stacks, cfg.phantom.test_fraction, cfg.seed)
    for part, members in (("train", split.train), ("test", split.test)):
        rows = []
        for s in members:
            p = out / "stacks" / f"{s.sample_id}.tensor"
            p.parent.mkdir(parents=True, exist_ok=True)
            save_tensor(p, s.slices)
            written.append(p)
            rows.append(ManifestRow(p.name, s.label, s.provenance))
        write_manifest(out / "stacks" / f"{part}.tsv", rows)
        written.append(out / "stacks" / f"{part}.tsv")
    start = stacks[0].depth_indices[0] if stacks else 0
    _write(out / "stacks" / "meta.json", json.dumps({"first_depth": start, **_stack_meta(cfg)}, sort_keys=True), written)


def load_stacks(out: Path, part: str, directory="stacks"):
    manifest = _require(out / directory / f"{part}.tsv", "run `gancnn preprocess` first")
    meta_path = out / directory / "meta.json"
    start = json.loads(meta_path.read_text())["first_depth"] if meta_path.exists() else 0
    stacks = []
    for row in read_manifest(manifest):
        arr = load_tensor(_require(manifest.parent / row.path))
        stacks.append(SliceStack(arr, range(start, start + arr.shape[0]), row.label, row.provenance,
                                 Path(row.path).stem))
    return stacks


def load_dataset(out: Path) -> SplitDataset:
    return SplitDataset(load_stacks(out, "train"), load_stacks(out, "test"))


def save_bank(bank: GanBank, out: Path, written: list):
    gan_dir = out / "gan"
    for (c, d, role), blob in bank.checkpoints().items():
        _write(gan_dir / "checkpoints" / f"{c}_d{d:02d}_{role}.ckpt", blob, written)
    meta = {
        "n_layers": bank.n_layers,
        "depth_indices": list(bank.depth_indices),
        "pairs": [{"class": c, "depth": d, "seed": p.seed, "epoch": p.epoch} for (c, d), p in sorted(bank.pairs.items())],
    }
    _write(gan_dir / "bank.json", json.dumps(meta, indent=1, sort_keys=True), written)
    for pair in bank.pairs.values():
        written.extend(write_snapshots(pair, gan_dir / "snapshots"))


def load_bank(out: Path, cfg: RunConfig) -> GanBank:
    meta = json.loads(_require(out / "gan" / "bank.json", "run `gancnn train-gan` first").read_text())
    gcfg = cfg.gan_config()
    bank = GanBank(n_layers=meta["n_layers"], depth_indices=tuple(meta["depth_indices"]))
    for entry in meta["pairs"]:
        c, d = entry["class"], entry["depth"]
        ck = out / "gan" / "checkpoints"
        G = load_checkpoint(_require(ck / f"{c}_d{d:02d}_generator.ckpt"), gcfg.generator())
        D = load_checkpoint(_require(ck / f"{c}_d{d:02d}_discriminator.ckpt"), gcfg.discriminator())
        bank.pairs[(c, d)] = GanPair(G, D, c, d, entry["seed"], entry["epoch"])
    return bank


def cmd_train_gan(cfg, out, args, written):
    data = load_dataset(out)
    gcfg = cfg.gan_config()
    if getattr(args, "epochs", None):
        gcfg = replace(gcfg, max_epochs=args.epochs, early_stop_epoch=None,
                       snapshot_epochs=tuple(e for e in gcfg.snapshot_epochs if e <= args.epochs))
    bank = train_gan_bank({c: data.by_class(c) for c in ("bipolar", "normal")}, gcfg, jobs=cfg.jobs)
    save_bank(bank, out, written)
    return bank


def cmd_synthesize(cfg, out, args, written):
    bank = load_bank(out, cfg)
    classes = [args.label] if args.label else ["normal", "bipolar"]
    rows = []
    for c in classes:
        for i in range(args.count):
            sid = f"gen-{c}-{i:04d}"
            stack = synthesize_stack(bank, c, derive_seed(cfg.seed, "synthesize", c, i), sid)
            p = out / "synth" / f"{sid}.tensor"
            p.parent.mkdir(parents=True, exist_ok=True)
            save_tensor(p, stack.slices)
            written.append(p)
            rows.append(ManifestRow(p.name, c, "generated"))
    write_manifest(out / "synth" / "manifest.tsv", rows)
    written.append(out / "synth" / "manifest.tsv")


def cmd_train_classifier(cfg, out, args, written):
    data = load_dataset(out)
    size = cfg.preprocess.classifier_size
    train = [to_sample(s, size) for s in data.train]
    if getattr(args, "generated", None):
        gen_manifest = _require(Path(args.generated))
        for row in read_manifest(gen_manifest):
            arr = load_tensor(_require(gen_manifest.parent / row.path))
            stack = SliceStack(arr, range(arr.shape[0]), row.label, "generated", Path(row.path).stem)
            train.append(to_sample(stack, size))
    test = [to_sample(s, size) for s in data.test]
    model = train_classifier(train, cfg.classifier_config())
    _write(out / "classifier" / "classifier.ckpt", checkpoint_bytes(model), written)
    p = predict_proba(model, [s.grid for s in test])[:, CLASS_INDEX["bipolar"]]
    preds = [(s.sample_id, s.label, float(pb)) for s, pb in zip(test, p)]
    path = out / "classifier" / "predictions.csv"
    write_predictions(preds, path)
    written.append(path)
    cm = ConfusionMatrix.from_predictions([t for _, t, _ in preds], ["bipolar" if q > 0.5 else "normal" for q in p])
    metrics = {"confusion": vars(cm), "metrics": vars(compute_metrics(cm))}
    _write(out / "classifier" / "metrics.json", json.dumps(metrics, indent=1, sort_keys=True), written)


def _ratio_list(text):
    try:
        ratios = tuple(float(r) for r in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if any(r < 0 for r in ratios):
        raise argparse.ArgumentTypeError("ratios must be non-negative")
    return ratios


def cmd_sweep(cfg, out, args, written):
    if args.ratios:
        cfg = replace(cfg, sweep=replace(cfg.sweep, ratios=args.ratios))
    if not (out / "stacks" / "train.tsv").exists():
        cmd_phantom(cfg, out, argparse.Namespace(count=None), written)
        cmd_preprocess(cfg, out, argparse.Namespace(manifest=None), written)
    bank = None
    if any(r > 0 for r in cfg.sweep.ratios):
        bank = load_bank(out, cfg) if (out / "gan" / "bank.json").exists() else \
            cmd_train_gan(cfg, out, argparse.Namespace(epochs=None), written)
    report = run_sweep(load_dataset(out), bank, cfg.sweep_config(), cfg.classifier_config(), cfg.seed, cfg.jobs)
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    write_experiment_log(report, sweep_dir / "experiment.jsonl")
    written.append(sweep_dir / "experiment.jsonl")
    for row in report.rows:
        for key, preds in sorted(row.predictions.items()):
            path = sweep_dir / "predictions" / f"ratio{row.ratio:g}_{key}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_predictions(preds, path)
            written.append(path)
    _write(sweep_dir / "report.md", render_report(report, "markdown"), written)
    _write(sweep_dir / "report.csv", render_report(report, "csv"), written)
    return cfg


def cmd_report(cfg, out, args, written):
    log_path = Path(args.log) if args.log else out / "sweep" / "experiment.jsonl"
    report = read_experiment_log(_require(log_path, "run `gancnn sweep` first"))
    formats = ["markdown", "csv"] if args.format == "both" else [args.format]
    for fmt in formats:
        suffix = "md" if fmt == "markdown" else "csv"
        _write(out / "reports" / f"report.{suffix}", render_report(report, fmt), written)


COMMANDS = {
    "phantom": (cmd_phantom, "emit a synthetic phantom dataset and manifest"),
    "preprocess": (cmd_preprocess, "NIfTI volumes -> train/test slice-stack files"),
    "train-gan": (cmd_train_gan, "train the per-(class, depth) GAN bank and write snapshots"),
    "synthesize": (cmd_synthesize, "emit generated slice stacks from a trained bank"),
    "train-classifier": (cmd_train_classifier, "train the 3-D CNN and score the held-out test set"),
    "sweep": (cmd_sweep, "run the augmentation-ratio sweep end to end"),
    "report": (cmd_report, "render sweep tables from an experiment log"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--jobs", type=int, help="parallel worker processes")
    common.add_argument("--preset", choices=["full", "desk"], help="configuration preset")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gancnn", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gancnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    parsers = {name: sub.add_parser(name, parents=[common], help=help_, description=help_)
               for name, (_, help_) in COMMANDS.items()}
    parsers["phantom"].add_argument("--count", type=int, help="total number of phantoms (class mix from config)")
    parsers["preprocess"].add_argument("--manifest", help="NIfTI manifest (default <out>/phantoms/manifest.tsv)")
    parsers["train-gan"].add_argument("--epochs", type=int, help="override the GAN epoch budget")
    parsers["synthesize"].add_argument("--count", type=int, default=1, help="stacks per class")
    parsers["synthesize"].add_argument("--class", dest="label", choices=["normal", "bipolar"])
    parsers["train-classifier"].add_argument("--generated", help="manifest of generated stacks to add to training")
    parsers["sweep"].add_argument("--ratios", type=_ratio_list, help="comma-separated augmentation ratios, e.g. 0,0.5")
    parsers["report"].add_argument("--log", help="experiment log (default <out>/sweep/experiment.jsonl)")
    parsers["report"].add_argument("--format", choices=["markdown", "csv", "both"], default="both")
    return parser


def resolve_config(args) -> RunConfig:
    env_out = os.environ.get(OUT_ENV)
    cfg = load_config(args.config, args.preset, defaults={"out": env_out} if env_out else None)
    flags = {k: getattr(args, k) for k in ("seed", "jobs", "out") if getattr(args, k) is not None}
    return apply_overrides(cfg, flags)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if cfg.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        written: list = []
        handler = COMMANDS[args.command][0]
        result = handler(cfg, out, args, written)
        if isinstance(result, RunConfig):
            cfg = result
        write_run_manifest(cfg, out, args.command, written)
    except (GanCnnError, OSError) as exc:
        print(f"gancnn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    bad = [p for p in written if not Path(p).is_file() or Path(p).stat().st_size == 0]
    if bad:
        print(f"gancnn {args.command}: error: artifacts missing or empty: {', '.join(map(str, bad))}", file=sys.stderr)
        return 1
    log.info("%s: wrote %d artifacts under %s", args.command, len(written), out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
