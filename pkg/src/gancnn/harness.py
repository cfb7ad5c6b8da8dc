"""Augmentation-ratio sweep: count planning, leakage-free training, metrics, reports."""
from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from .classifier import CLASS_INDEX, ClassifierTrainConfig, make_folds, predict_proba, to_sample, train_classifier
from .errors import ConfigError, ContractError
from .gan import GanBank, synthesize_stacks
from .seeding import derive_seed

UNDEFINED = "n/a"
METRIC_NAMES = ("sensitivity", "specificity", "precision", "accuracy", "f1")
METRIC_TITLES = {
    "sensitivity": "Sensitivity", "specificity": "Specificity", "precision": "Precision",
    "accuracy": "Accuracy", "f1": "F1-score",
}

# Published train counts (normal, bipolar) for the 123/49 cohort with a 92/37 train split.
REFERENCE_TRAIN_COUNTS = {
    0.0: (92, 37), 0.25: (122, 49), 0.5: (153, 61), 0.75: (184, 73), 1.0: (215, 85), 3.0: (474, 181),
}
REFERENCE_COHORT = {"class_totals": (123, 49), "base_train": (92, 37)}


class AugmentationCountDeviation(UserWarning):
    pass


# -- counts --------------------------------------------------------------

@dataclass(frozen=True)
class ClassCounts:
    base_train: int
    class_total: int
    generated_added: int
    final_train: int
    test: int


@dataclass(frozen=True)
class AugmentationPlan:
    ratio: float
    normal: ClassCounts
    bipolar: ClassCounts

    def counts(self, label) -> ClassCounts:
        return getattr(self, label)


def plan_augmentation(ratio, class_totals=(123, 49), base_train=(92, 37), test=(31, 12)) -> AugmentationPlan:
    """Generated samples per class are ``floor(ratio * class_total)``.

    Tuples are ordered (normal, bipolar). For the reference cohort, cells where
    this rule departs from the published counts raise
    :class:`AugmentationCountDeviation` warnings.
    """
    if ratio < 0:
        raise ContractError(f"augmentation ratio must be non-negative, got {ratio}")
    exact = Fraction(repr(float(ratio)))
    per_class = []
    for base, total, n_test in zip(base_train, class_totals, test):
        added = math.floor(exact * total)
        per_class.append(ClassCounts(base, total, added, base + added, n_test))
    plan = AugmentationPlan(float(ratio), *per_class)
    ref = REFERENCE_TRAIN_COUNTS.get(float(ratio))
    if ref is not None and tuple(class_totals) == REFERENCE_COHORT["class_totals"] \
            and tuple(base_train) == REFERENCE_COHORT["base_train"]:
        for label, published in zip(("normal", "bipolar"), ref):
            got = plan.counts(label).final_train
            if got != published:
                warnings.warn(f"ratio {ratio:g}: {label} train count by rule is {got}, published count is {published}",
                              AugmentationCountDeviation, stacklevel=2)
    return plan


# -- metrics -------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fn + self.tn + self.fp

    @classmethod
    def from_predictions(cls, y_true, y_pred, positive="bipolar"):
        tp = fn = tn = fp = 0
        for t, p in zip(y_true, y_pred):
            if t == positive:
                tp, fn = (tp + 1, fn) if p == positive else (tp, fn + 1)
            else:
                fp, tn = (fp + 1, tn) if p == positive else (fp, tn + 1)
        return cls(tp, fn, tn, fp)


def _ratio(num, den):
    return None if den == 0 else num / den


@dataclass(frozen=True)
class Metrics:
    """Classification metrics; ``None`` marks an undefined value (zero denominator)."""

    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    f1: float | None


def compute_metrics(c: ConfusionMatrix) -> Metrics:
    sens = _ratio(c.tp, c.tp + c.fn)
    prec = _ratio(c.tp, c.tp + c.fp)
    f1 = None
    if sens is not None and prec is not None and prec + sens > 0:
        f1 = 2 * prec * sens / (prec + sens)
    return Metrics(
        accuracy=_ratio(c.tp + c.tn, c.total),
        sensitivity=sens,
        specificity=_ratio(c.tn, c.tn + c.fp),
        precision=prec,
        f1=f1,
    )


def mean_metrics(matrices) -> Metrics:
    """Fold-mean of each metric over the folds where it is defined."""
    per = [compute_metrics(c) for c in matrices]
    out = {}
    for name in METRIC_NAMES:
        vals = [getattr(m, name) for m in per if getattr(m, name) is not None]
        out[name] = float(np.mean(vals)) if vals else None
    return Metrics(**out)


def format_metric(value):
    return UNDEFINED if value is None else f"{100 * value:.1f}%"


# -- dataset and sweep ----------------------------------------------------

@dataclass
class SplitDataset:
    """Real stacks at GAN resolution, split into a training pool and a fixed test set."""

    train: list
    test: list

    def by_class(self, label):
        return [s for s in self.train if s.label == label]

    def counts(self):
        tr = tuple(sum(1 for s in self.train if s.label == c) for c in ("normal", "bipolar"))
        te = tuple(sum(1 for s in self.test if s.label == c) for c in ("normal", "bipolar"))
        return tr, te


def split_stacks(stacks, test_fraction=0.25, seed=0) -> SplitDataset:
    """Per-class seeded hold-out; ``round(test_fraction * n)`` test samples per class."""
    rng = np.random.default_rng(derive_seed(seed, "holdout"))
    train, test = [], []
    for label in ("normal", "bipolar"):
        members = sorted((s for s in stacks if s.label == label), key=lambda s: s.sample_id)
        n_test = int(round(test_fraction * len(members)))
        chosen = set(rng.permutation(len(members))[:n_test].tolist())
        for i, s in enumerate(members):
            (test if i in chosen else train).append(s)
    return SplitDataset(train, test)


@dataclass(frozen=True)
class SweepConfig:
    ratios: tuple = (0.0, 0.25, 0.5, 0.75, 1.0, 3.0)
    folds: int = 5
    cross_validate: bool = True
    classifier_size: int | None = 32

    def __post_init__(self):
        if not self.ratios:
            raise ConfigError("sweep needs at least one ratio")
        if any(r < 0 for r in self.ratios):
            raise ConfigError("augmentation ratios must be non-negative")


@dataclass
class RatioRow:
    ratio: float
    plan: AugmentationPlan
    test_confusion: ConfusionMatrix
    fold_confusions: list
    test_ids: list
    folds: list  # [{"train": [...], "validate": [...]}]
    generated_ids: list
    predictions: dict  # "test" / "fold0".. -> [(sample_id, true_label, p_bipolar)]
    seed: int
    wall_time: float = 0.0

    @property
    def test_metrics(self):
        return compute_metrics(self.test_confusion)

    @property
    def cv_metrics(self):
        return mean_metrics(self.fold_confusions) if self.fold_confusions else None

    def to_json(self):
        return {
            "ratio": self.ratio,
            "plan": asdict(self.plan),
            "test_confusion": asdict(self.test_confusion),
            "fold_confusions": [asdict(c) for c in self.fold_confusions],
            "test_metrics": asdict(self.test_metrics),
            "cv_metrics": asdict(self.cv_metrics) if self.cv_metrics else None,
            "test_ids": self.test_ids,
            "folds": self.folds,
            "generated_ids": self.generated_ids,
            "predictions": {k: [list(r) for r in v] for k, v in self.predictions.items()},
            "seed": self.seed,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_json(cls, d):
        plan = d["plan"]
        return cls(
            ratio=d["ratio"],
            plan=AugmentationPlan(plan["ratio"], ClassCounts(**plan["normal"]), ClassCounts(**plan["bipolar"])),
            test_confusion=ConfusionMatrix(**d["test_confusion"]),
            fold_confusions=[ConfusionMatrix(**c) for c in d["fold_confusions"]],
            test_ids=d["test_ids"],
            folds=d["folds"],
            generated_ids=d["generated_ids"],
            predictions={k: [tuple(r) for r in v] for k, v in d["predictions"].items()},
            seed=d["seed"],
            wall_time=d.get("wall_time", 0.0),
        )


@dataclass
class ExperimentReport:
    rows: list
    seed: int
    config: dict = field(default_factory=dict)

    def row(self, ratio):
        return next(r for r in self.rows if r.ratio == ratio)


def _fit_and_score(job):
    train, evaluate, cfg = job
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        model = train_classifier(train, cfg)
        p = predict_proba(model, [s.grid for s in evaluate])
    return [(s.sample_id, s.label, float(pb)) for s, pb in zip(evaluate, p[:, CLASS_INDEX["bipolar"]])]


def _confusion(preds):
    return ConfusionMatrix.from_predictions(
        [t for _, t, _ in preds], ["bipolar" if p > 0.5 else "normal" for _, _, p in preds])


def generate_samples(bank, plan, seed, size):
    """Generated training samples for a plan; ids are shared across ratios so larger
    ratios extend (never replace) the samples of smaller ones."""
    out = []
    for label in ("normal", "bipolar"):
        n = plan.counts(label).generated_added
        ids = [f"gen-{label}-{i:04d}" for i in range(n)]
        seeds = [derive_seed(seed, "synthesize", label, i) for i in range(n)]
        out.extend(to_sample(s, size) for s in synthesize_stacks(bank, label, seeds, ids))
    return out


def _take_generated(pool, plan):
    """The prefix of a larger generated pool that a smaller plan asks for."""
    by_label = {label: [s for s in pool if s.label == label] for label in ("normal", "bipolar")}
    return [s for label in ("normal", "bipolar") for s in by_label[label][:plan.counts(label).generated_added]]


def run_sweep(dataset: SplitDataset, bank: GanBank | None, config: SweepConfig,
              classifier: ClassifierTrainConfig, seed=0, jobs=1) -> ExperimentReport:
    """Train and evaluate the classifier at every augmentation ratio.

    Generated samples only ever join training sides: the fixed test set and
    every cross-validation fold are drawn from real samples alone.
    """
    ratios = sorted(float(r) for r in config.ratios)
    if any(r > 0 for r in ratios):
        for label in ("normal", "bipolar"):
            if bank is None or not bank.is_complete(label):
                raise ContractError(f"augmentation needs a complete GAN bank for class {label!r}")
    real_train = [to_sample(s, config.classifier_size) for s in dataset.train]
    test = [to_sample(s, config.classifier_size) for s in dataset.test]
    (n_tr, b_tr), (n_te, b_te) = dataset.counts()
    plan_args = dict(class_totals=(n_tr + n_te, b_tr + b_te), base_train=(n_tr, b_tr), test=(n_te, b_te))
    fold_plan = make_folds(real_train, config.folds, derive_seed(seed, "cv")) if config.cross_validate else None

    plans = {ratio: plan_augmentation(ratio, **plan_args) for ratio in ratios}
    pool = generate_samples(bank, plans[ratios[-1]], seed, config.classifier_size) if ratios[-1] > 0 else []

    jobs_spec, layout = [], []
    row_meta = {}
    for ratio in ratios:
        plan = plans[ratio]
        generated = _take_generated(pool, plan)
        folds = []
        if fold_plan is not None:
            for f in range(config.folds):
                tr, val = fold_plan.split(real_train, f)
                folds.append({"train": [s.sample_id for s in tr + generated], "validate": [s.sample_id for s in val]})
                cfg = replace(classifier, seed=derive_seed(seed, "fit", ratio, f))
                jobs_spec.append((tr + generated, val, cfg))
                layout.append((ratio, f"fold{f}"))
        cfg = replace(classifier, seed=derive_seed(seed, "fit", ratio, "final"))
        jobs_spec.append((real_train + generated, test, cfg))
        layout.append((ratio, "test"))
        row_meta[ratio] = (plan, folds, [s.sample_id for s in generated])

    started = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_and_score, jobs_spec))
    else:
        results = [_fit_and_score(j) for j in jobs_spec]
    elapsed = time.perf_counter() - started

    rows = []
    for ratio in ratios:
        plan, folds, gen_ids = row_meta[ratio]
        preds = {key: res for (r, key), res in zip(layout, results) if r == ratio}
        fold_keys = sorted(k for k in preds if k.startswith("fold"))
        rows.append(RatioRow(
            ratio=ratio, plan=plan, test_confusion=_confusion(preds["test"]),
            fold_confusions=[_confusion(preds[k]) for k in fold_keys],
            test_ids=[s.sample_id for s in test], folds=folds, generated_ids=gen_ids,
            predictions=preds, seed=seed, wall_time=round(elapsed / len(ratios), 3),
        ))
    return ExperimentReport(rows, seed)


# -- log and rendering ------------------------------------------------------

def write_experiment_log(report: ExperimentReport, path):
    with open(path, "w") as fh:
        for row in report.rows:
            fh.write(json.dumps(row.to_json(), sort_keys=True) + "\n")


def read_experiment_log(path) -> ExperimentReport:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(RatioRow.from_json(json.loads(line)))
    if not rows:
        raise ContractError(f"{path}: experiment log has no rows")
    rows.sort(key=lambda r: r.ratio)
    return ExperimentReport(rows, rows[0].seed)


def ratio_label(ratio):
    return "Base-0%" if ratio == 0 else f"{100 * ratio:g}%"


def _table5(report: ExperimentReport):
    header = ["Augmentation Ratio"] + [ratio_label(r.ratio) for r in report.rows]
    body = []
    for label, title in (("normal", "Normal (Train, Test)"), ("bipolar", "Bipolar (Train, Test)")):
        body.append([title] + [f"({r.plan.counts(label).final_train}, {r.plan.counts(label).test})"
                               for r in report.rows])
    body.append(["Accuracy rate"] + [format_metric(r.test_metrics.accuracy) for r in report.rows])
    body.append(["F1-score"] + [format_metric(r.test_metrics.f1) for r in report.rows])
    for name in ("sensitivity", "specificity", "precision"):
        body.append([METRIC_TITLES[name]] + [format_metric(getattr(r.test_metrics, name)) for r in report.rows])
    if any(r.cv_metrics for r in report.rows):
        for name, title in (("accuracy", "CV accuracy (mean)"), ("f1", "CV F1-score (mean)")):
            body.append([title] + [format_metric(getattr(r.cv_metrics, name)) if r.cv_metrics else UNDEFINED
                                   for r in report.rows])
    return header, body


def _table4(report: ExperimentReport):
    header = ["Study", "Dataset", "Augmentation", "Classifier"] + [METRIC_TITLES[n] for n in METRIC_NAMES]
    body = []
    for r in report.rows:
        n, b = r.plan.normal, r.plan.bipolar
        aug = "none" if r.ratio == 0 else f"GAN {ratio_label(r.ratio)}"
        body.append([f"ratio {ratio_label(r.ratio)}", f"{n.base_train} Normal {b.base_train} Bipolar", aug, "3-D CNN"]
                    + [format_metric(getattr(r.test_metrics, m)) for m in METRIC_NAMES])
    return header, body


def _markdown_table(header, body):
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in body]
    return "\n".join(lines)


def render_report(report: ExperimentReport, fmt="markdown") -> str:
    """Augmentation-sweep matrix (ratios as columns) and a per-ratio metric table."""
    if fmt == "csv":
        header, body = _table5(report)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    parts = [
        f"# Augmentation sweep (seed {report.seed})",
        "",
        "## Impact of augmentation on the held-out test set",
        "",
        _markdown_table(*_table5(report)),
        "",
        "## Metric summary",
        "",
        _markdown_table(*_table4(report)),
        "",
    ]
    return "\n".join(parts)


def write_predictions(preds, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "true_label", "p_bipolar"])
        for sid, label, p in preds:
            writer.writerow([sid, label, f"{p:.6f}"])
