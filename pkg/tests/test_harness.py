import csv
import io
import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gancnn.errors import ContractError
from gancnn.harness import (
    AugmentationCountDeviation, ConfusionMatrix, SweepConfig, compute_metrics, format_metric, mean_metrics,
    plan_augmentation, read_experiment_log, render_report, run_sweep, split_stacks, write_experiment_log,
    write_predictions,
)

from conftest import TINY_CLASSIFIER, tiny_stacks

PUBLISHED = {0.0: (92, 37), 0.25: (122, 49), 0.5: (153, 61), 0.75: (184, 73)}


# -- augmentation counts --------------------------------------------------------------------

@pytest.mark.parametrize("ratio", sorted(PUBLISHED))
def test_published_counts(ratio):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        plan = plan_augmentation(ratio)
    assert (plan.normal.final_train, plan.bipolar.final_train) == PUBLISHED[ratio]
    assert (plan.normal.test, plan.bipolar.test) == (31, 12)


def test_ratio_zero_generates_nothing():
    plan = plan_augmentation(0)
    assert plan.normal.generated_added == plan.bipolar.generated_added == 0


def test_full_ratio_normal_matches_and_bipolar_warns():
    with pytest.warns(AugmentationCountDeviation) as record:
        plan = plan_augmentation(1.0)
    assert plan.normal.final_train == 215
    assert plan.bipolar.final_train == 86
    assert len(record) == 1 and "bipolar" in str(record[0].message)


def test_triple_ratio_warns_for_both():
    with pytest.warns(AugmentationCountDeviation) as record:
        plan = plan_augmentation(3.0)
    assert (plan.normal.final_train, plan.bipolar.final_train) == (461, 184)
    assert len(record) == 2


def test_other_cohorts_do_not_warn():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        plan_augmentation(3.0, class_totals=(40, 24), base_train=(30, 18), test=(10, 6))


def test_negative_ratio():
    with pytest.raises(ContractError):
        plan_augmentation(-0.1)


@given(st.lists(st.floats(0, 5, allow_nan=False), min_size=2, max_size=6))
@settings(max_examples=50, deadline=None)
def test_counts_monotone_and_floor(ratios):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        plans = [plan_augmentation(r) for r in sorted(ratios)]
    for a, b in zip(plans, plans[1:]):
        assert a.normal.final_train <= b.normal.final_train
        assert a.bipolar.final_train <= b.bipolar.final_train
    for p in plans:
        exact = Fraction(p.ratio)
        assert p.normal.generated_added == math.floor(exact * 123)
        assert p.bipolar.test == 12


# -- metrics ---------------------------------------------------------------------------------

def test_hand_example():
    m = compute_metrics(ConfusionMatrix(tp=3, fn=2, tn=8, fp=2))
    assert m.sensitivity == pytest.approx(0.6)
    assert m.specificity == pytest.approx(0.8)
    assert m.precision == pytest.approx(0.6)
    assert m.accuracy == pytest.approx(11 / 15)
    assert m.f1 == pytest.approx(0.6)
    assert format_metric(m.accuracy) == "73.3%"


def test_perfect():
    m = compute_metrics(ConfusionMatrix(tp=4, fn=0, tn=7, fp=0))
    assert (m.accuracy, m.sensitivity, m.specificity, m.precision, m.f1) == (1, 1, 1, 1, 1)


def test_all_negative_predictor():
    m = compute_metrics(ConfusionMatrix(tp=0, fn=5, tn=9, fp=0))
    assert m.sensitivity == 0 and m.specificity == 1
    assert m.precision is None and m.f1 is None
    assert format_metric(m.precision) == "n/a"


def test_no_positives_and_empty():
    m = compute_metrics(ConfusionMatrix(tp=0, fn=0, tn=3, fp=1))
    assert m.sensitivity is None and m.precision == 0.0 and m.f1 is None
    empty = compute_metrics(ConfusionMatrix())
    assert all(getattr(empty, n) is None for n in ("accuracy", "sensitivity", "specificity", "precision", "f1"))


def test_negative_counts_rejected():
    with pytest.raises(ContractError):
        ConfusionMatrix(tp=-1)


def brute_force(y_true, y_pred):
    """Recount every metric straight from the per-sample labels."""
    pos = [p for t, p in zip(y_true, y_pred) if t == "bipolar"]
    neg = [p for t, p in zip(y_true, y_pred) if t == "normal"]
    called = [t for t, p in zip(y_true, y_pred) if p == "bipolar"]
    correct = sum(1 for t, p in zip(y_true, y_pred) if t == p)
    sens = pos.count("bipolar") / len(pos) if pos else None
    spec = neg.count("normal") / len(neg) if neg else None
    prec = called.count("bipolar") / len(called) if called else None
    acc = correct / len(y_true) if y_true else None
    f1 = 2 * prec * sens / (prec + sens) if prec is not None and sens is not None and prec + sens > 0 else None
    return dict(accuracy=acc, sensitivity=sens, specificity=spec, precision=prec, f1=f1)


def random_prediction_set(rng):
    n = int(rng.integers(0, 40))
    labels = np.array(["normal", "bipolar"])
    bias = rng.uniform(0, 1)
    y_true = list(labels[(rng.random(n) < bias).astype(int)])
    y_pred = list(labels[(rng.random(n) < rng.uniform(0, 1)).astype(int)])
    return y_true, y_pred


def metric_oracle_mismatches(n_sets=1000, seed=0):
    rng = np.random.default_rng(seed)
    bad = []
    for i in range(n_sets):
        y_true, y_pred = random_prediction_set(rng)
        got = compute_metrics(ConfusionMatrix.from_predictions(y_true, y_pred)).__dict__
        want = brute_force(y_true, y_pred)
        if got != want:
            bad.append((i, got, want))
        if got["f1"] is not None:
            ident = 2 * got["precision"] * got["sensitivity"] / (got["precision"] + got["sensitivity"])
            if abs(got["f1"] - ident) > 1e-9:
                bad.append((i, "f1 identity"))
        if any(isinstance(v, float) and math.isnan(v) for v in got.values()):
            bad.append((i, "nan"))
    return bad


def test_metric_oracle_1000_sets():
    assert metric_oracle_mismatches() == []


def test_mean_metrics_skips_undefined():
    m = mean_metrics([ConfusionMatrix(tp=1, fn=1, tn=2, fp=0), ConfusionMatrix(tp=0, fn=2, tn=2, fp=0)])
    assert m.sensitivity == pytest.approx(0.25)
    assert m.precision == pytest.approx(1.0)  # second fold's precision is undefined


# -- splitting and sweeps ---------------------------------------------------------------------

def test_split_counts_and_determinism():
    stacks = tiny_stacks(40, 24)
    a = split_stacks(stacks, 0.25, seed=3)
    b = split_stacks(stacks, 0.25, seed=3)
    assert a.counts() == ((30, 18), (10, 6))
    assert [s.sample_id for s in a.test] == [s.sample_id for s in b.test]
    c = split_stacks(stacks, 0.25, seed=4)
    assert {s.sample_id for s in a.test} != {s.sample_id for s in c.test}


@pytest.fixture(scope="module")
def sweep(tiny_pipeline):
    ds, bank = tiny_pipeline
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AugmentationCountDeviation)
        return run_sweep(ds, bank, SweepConfig((0.0, 0.25, 0.5, 0.75, 1.0, 3.0), classifier_size=None),
                         TINY_CLASSIFIER, seed=0)


def test_sweep_structure(sweep, tiny_pipeline):
    ds, _ = tiny_pipeline
    assert [r.ratio for r in sweep.rows] == [0.0, 0.25, 0.5, 0.75, 1.0, 3.0]
    (n_tr, b_tr), (n_te, b_te) = ds.counts()
    for row in sweep.rows:
        total_n, total_b = n_tr + n_te, b_tr + b_te
        assert row.plan.normal.generated_added == math.floor(row.ratio * total_n)
        assert len(row.generated_ids) == row.plan.normal.generated_added + row.plan.bipolar.generated_added
        assert len(row.fold_confusions) == 5
        assert row.test_confusion.total == n_te + b_te
        for name in ("accuracy", "sensitivity", "specificity", "precision", "f1"):
            v = getattr(row.test_metrics, name)
            assert v is None or 0 <= v <= 1


def test_sweep_no_leakage(sweep):
    first_test = sweep.rows[0].test_ids
    for row in sweep.rows:
        assert row.test_ids == first_test
        assert not any(sid.startswith("gen-") for sid in row.test_ids)
        gen = set(row.generated_ids)
        for fold in row.folds:
            assert not gen & set(fold["validate"])
            assert not set(fold["train"]) & set(fold["validate"])
            assert gen <= set(fold["train"])
        for key, preds in row.predictions.items():
            assert not any(sid in gen for sid, _, _ in preds)


def test_generated_ids_nest_across_ratios(sweep):
    for a, b in zip(sweep.rows, sweep.rows[1:]):
        assert set(a.generated_ids) <= set(b.generated_ids)


def test_sweep_deterministic(sweep, tiny_pipeline):
    ds, bank = tiny_pipeline
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AugmentationCountDeviation)
        again = run_sweep(ds, bank, SweepConfig((0.0, 0.25, 0.5, 0.75, 1.0, 3.0), classifier_size=None),
                          TINY_CLASSIFIER, seed=0)
    assert render_report(again) == render_report(sweep)
    assert [r.predictions for r in again.rows] == [r.predictions for r in sweep.rows]


def test_sweep_parallel_matches_serial(tiny_pipeline):
    ds, bank = tiny_pipeline
    cfg = SweepConfig((0.0, 0.5), classifier_size=None)
    serial = run_sweep(ds, bank, cfg, TINY_CLASSIFIER, seed=2, jobs=1)
    parallel = run_sweep(ds, bank, cfg, TINY_CLASSIFIER, seed=2, jobs=2)
    assert [r.predictions for r in serial.rows] == [r.predictions for r in parallel.rows]


def test_sweep_config_validation():
    from gancnn.errors import ConfigError
    with pytest.raises(ConfigError):
        SweepConfig(())
    with pytest.raises(ConfigError):
        SweepConfig((0.0, -0.5))


def test_generated_samples_shared_across_ratios(tiny_pipeline):
    from gancnn.harness import generate_samples
    ds, bank = tiny_pipeline
    (n_tr, b_tr), (n_te, b_te) = ds.counts()
    args = dict(class_totals=(n_tr + n_te, b_tr + b_te), base_train=(n_tr, b_tr), test=(n_te, b_te))
    small = generate_samples(bank, plan_augmentation(0.25, **args), 0, None)
    big = {s.sample_id: s for s in generate_samples(bank, plan_augmentation(1.0, **args), 0, None)}
    for s in small:
        np.testing.assert_allclose(s.grid, big[s.sample_id].grid, atol=1e-6)


def test_sweep_without_bank(tiny_pipeline):
    ds, _ = tiny_pipeline
    with pytest.raises(ContractError):
        run_sweep(ds, None, SweepConfig((0.0, 0.5), classifier_size=None), TINY_CLASSIFIER)
    report = run_sweep(ds, None, SweepConfig((0.0,), cross_validate=False, classifier_size=None), TINY_CLASSIFIER)
    assert report.rows[0].fold_confusions == [] and report.rows[0].cv_metrics is None


# -- rendering and logs --------------------------------------------------------------------

def test_render_csv_shape(sweep):
    rows = list(csv.reader(io.StringIO(render_report(sweep, "csv"))))
    assert rows[0] == ["Augmentation Ratio", "Base-0%", "25%", "50%", "75%", "100%", "300%"]
    assert all(len(r) == 7 for r in rows)
    labels = [r[0] for r in rows]
    for label in ("Normal (Train, Test)", "Bipolar (Train, Test)", "Accuracy rate", "F1-score"):
        assert label in labels


def test_render_markdown(sweep):
    md = render_report(sweep, "markdown")
    acc = next(line for line in md.splitlines() if line.startswith("| Accuracy rate"))
    assert acc.count("|") == 8
    assert "| Study | Dataset | Augmentation | Classifier | Sensitivity | Specificity | Precision | Accuracy " \
           "| F1-score |" in md
    assert render_report(sweep, "markdown") == md
    assert "nan" not in md.lower()
    with pytest.raises(ValueError):
        render_report(sweep, "html")


def test_undefined_renders_na(sweep):
    from dataclasses import replace
    row = replace(sweep.rows[0], test_confusion=ConfusionMatrix(tp=0, fn=3, tn=5, fp=0))
    report = replace(sweep, rows=[row])
    md = render_report(report)
    assert "| Precision | n/a |" in md


def test_log_round_trip(sweep, tmp_path):
    path = tmp_path / "log.jsonl"
    write_experiment_log(sweep, path)
    assert len(path.read_text().splitlines()) == 6
    back = read_experiment_log(path)
    assert render_report(back, "csv") == render_report(sweep, "csv")
    assert render_report(back, "markdown") == render_report(sweep, "markdown")
    for a, b in zip(back.rows, sweep.rows):
        assert compute_metrics(a.test_confusion) == b.test_metrics
        assert a.predictions == b.predictions


def test_empty_log(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    with pytest.raises(ContractError):
        read_experiment_log(tmp_path / "e.jsonl")


def test_prediction_dump(tmp_path):
    write_predictions([("a", "normal", 0.25), ("b", "bipolar", 0.9)], tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text() == "sample_id,true_label,p_bipolar\na,normal,0.250000\nb,bipolar,0.900000\n"
