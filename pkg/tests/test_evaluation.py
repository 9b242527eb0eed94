import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from octshift.errors import OrchestrationError, ValidationError
from octshift.evaluation import (
    ConfusionCounts,
    ExperimentPlan,
    confusion,
    f1_score,
    prf1,
    run_experiment,
    variant_transform,
)
from octshift.phantom import PhantomParams, as_dataset, generate_dataset
from octshift.segmentation import SegConfig, SegModel, build_unet
from octshift.volume import LabelMap


def brute_confusion(pred, gt, c):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == c and g == c:
            tp += 1
        elif p == c:
            fp += 1
        elif g == c:
            fn += 1
    return tp, fp, fn


def test_confusion_matches_pixel_loop():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred, gt = rng.integers(0, 3, (16, 16)), rng.integers(0, 3, (16, 16))
        for c in (1, 2):
            assert confusion(pred, gt, c) == brute_confusion(pred, gt, c)


def test_confusion_trivia():
    gt = np.array([[1, 1], [2, 0]])
    assert confusion(gt, gt, 1) == (2, 0, 0)
    assert confusion(np.zeros_like(gt), gt, 1) == (0, 0, 2)
    with pytest.raises(ValidationError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)), 1)
    assert confusion(LabelMap(gt[..., None]), LabelMap(gt[..., None]), 2) == (1, 0, 0)


def test_reported_f1_values():
    # reported rows: Pr 0.60 / Rec 0.30 -> F1 0.40, Pr 0.60 / Rec 0.45 -> F1 0.52
    assert f1_score(0.60, 0.30) == pytest.approx(0.40)
    assert 0.51 <= f1_score(0.60, 0.45) <= 0.52
    assert round(f1_score(0.60, 0.45), 3) == 0.514


def test_zero_rule():
    assert prf1(0, 0, 0) == (0.0, 0.0, 0.0)
    assert prf1(0, 5, 0) == (0.0, 0.0, 0.0)
    assert prf1(3, 0, 1) == (1.0, 0.75, pytest.approx(6 / 7))


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(1, 20))
def test_prf1_scale_invariant_and_bounded(tp, fp, fn, k):
    a = prf1(tp, fp, fn)
    assert a == pytest.approx(prf1(k * tp, k * fp, k * fn))
    assert all(0 <= v <= 1 for v in a)


def test_counts_are_additive():
    rng = np.random.default_rng(1)
    pairs = [(rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))) for _ in range(4)]
    whole = ConfusionCounts()
    for p, g in pairs:
        whole.add(p, g)
    halves = ConfusionCounts().add(*pairs[0]).add(*pairs[1]) + ConfusionCounts().add(*pairs[2]).add(*pairs[3])
    assert whole.counts == halves.counts
    stacked = ConfusionCounts().add(np.stack([p for p, _ in pairs]), np.stack([g for _, g in pairs]))
    assert stacked.counts == whole.counts


@pytest.fixture(scope="module")
def tiny_plan_parts():
    pairs, manifest = generate_dataset(10, 1, PhantomParams(shape=(32, 32, 2), seed=4))
    ds = as_dataset(pairs, manifest)
    model = SegModel(build_unet(SegConfig(depth=2, base_channels=4, seed=1)).eval())
    return ds, model


def test_row_count_contract(tiny_plan_parts):
    ds, model = tiny_plan_parts
    report = run_experiment(ExperimentPlan(ds, ("none",), upper_bound=False, source_model=model))
    assert [r.row for r in [report.reference, *report.rows]] == ["Source-on-source", "None"]
    doc = report.to_json()
    assert len(doc["rows"]) == 4
    assert {"precision", "recall", "f1", "tp", "fp", "fn"} <= set(doc["rows"][0])
    assert "Transformation" in report.render_table().splitlines()[0]


def test_rows_independent_of_variant_order(tiny_plan_parts):
    ds, model = tiny_plan_parts
    a = run_experiment(ExperimentPlan(ds, ("none", "t1", "t2"), upper_bound=False, source_model=model))
    b = run_experiment(ExperimentPlan(ds, ("t2", "none", "t1"), upper_bound=False, source_model=model))
    for name in ("None", "T1", "T2"):
        assert a.row(name).counts.counts == b.row(name).counts.counts
    assert a.dumps() == run_experiment(
        ExperimentPlan(ds, ("none", "t1", "t2"), upper_bound=False, source_model=model)
    ).dumps()


def test_upper_bound_row(tiny_plan_parts):
    ds, model = tiny_plan_parts
    report = run_experiment(ExperimentPlan(ds, ("none",), source_model=model, target_model=model))
    assert report.rows[-1].row == "*Target-on-target"


def test_missing_upstream_artifacts(tiny_plan_parts):
    ds, _ = tiny_plan_parts
    with pytest.raises(OrchestrationError, match="select-generator"):
        variant_transform("cgan-64", ds)
    with pytest.raises(OrchestrationError):
        variant_transform("t2", ds)
    with pytest.raises(ValidationError):
        ExperimentPlan(ds, ())
