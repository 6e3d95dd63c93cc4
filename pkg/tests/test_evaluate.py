import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mood.datamodel import FeatureSet
from mood.errors import DataError, ShapeError
from mood.evaluate import (
    EvalReport,
    auroc,
    build_report,
    confusion_counts,
    fpr_at_tpr,
    histogram,
    histogram_csv,
    threshold_at_tpr,
)
from mood.gaussian import GaussianModel, mahalanobis_score, predict_class


def brute_force_auroc(id_scores, ood_scores) -> float:
    ids = np.asarray(id_scores, dtype=np.float64)
    oods = np.asarray(ood_scores, dtype=np.float64)
    gt = (oods[:, None] > ids[None, :]).sum()
    eq = (oods[:, None] == ids[None, :]).sum()
    return float((gt + 0.5 * eq) / (ids.size * oods.size))


def test_auroc_examples():
    assert auroc([0, 1], [2, 3]) == 1.0
    assert auroc([1, 2, 3], [1, 2, 3]) == 0.5
    assert auroc([1, 3], [2, 4]) == 0.75  # 3 of 4 pairs won, 1 lost


@settings(max_examples=60, deadline=None)
@given(
    id_scores=st.lists(st.integers(-5, 5), min_size=1, max_size=30),
    ood_scores=st.lists(st.integers(-5, 5), min_size=1, max_size=30),
)
def test_auroc_matches_brute_force_with_heavy_ties(id_scores, ood_scores):
    assert auroc(id_scores, ood_scores) == pytest.approx(
        brute_force_auroc(id_scores, ood_scores), abs=1e-12
    )


def test_auroc_monotone_invariance_and_complement():
    rng = np.random.Generator(np.random.PCG64(0))
    for _ in range(20):
        ids = rng.normal(size=rng.integers(1, 50))
        oods = rng.normal(size=rng.integers(1, 50))
        base = auroc(ids, oods)
        assert auroc(np.exp(ids), np.exp(oods)) == pytest.approx(base, abs=1e-12)
        assert auroc(ids, oods) + auroc(oods, ids) == pytest.approx(1.0, abs=1e-12)


def test_auroc_rejects_empty():
    with pytest.raises(DataError):
        auroc([], [1.0])
    with pytest.raises(DataError):
        auroc([1.0], [])


def test_threshold_examples():
    scores = np.arange(1, 21, dtype=float)
    assert threshold_at_tpr(scores, 0.95) == 19.0
    assert threshold_at_tpr(scores, 1.0) == 20.0
    assert threshold_at_tpr(np.full(7, 3.25), 0.4) == 3.25


def test_threshold_accepts_required_fraction():
    rng = np.random.Generator(np.random.PCG64(1))
    for _ in range(30):
        scores = rng.normal(size=int(rng.integers(1, 60)))
        tpr = float(rng.uniform(0.05, 1.0))
        t = threshold_at_tpr(scores, tpr)
        assert np.mean(scores <= t) >= tpr
        smaller = scores[scores < t]
        if smaller.size:
            assert np.mean(scores <= smaller.max()) < tpr


def test_fpr_examples():
    ids = np.arange(1, 21, dtype=float)
    assert fpr_at_tpr(ids, ids + 100, 0.95) == 0.0
    assert fpr_at_tpr(ids, ids.copy(), 0.95) == pytest.approx(19 / 20)
    assert fpr_at_tpr(ids, [1000.0], 0.95) == 0.0


def test_fpr_non_decreasing_in_tpr():
    rng = np.random.Generator(np.random.PCG64(2))
    ids = rng.normal(size=40)
    oods = rng.normal(loc=1.0, size=30)
    values = [fpr_at_tpr(ids, oods, t) for t in np.linspace(0.05, 1.0, 20)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_histogram_boundary_rule():
    edges, counts = histogram([0.0, 0.5, 1.0], bins=2)
    np.testing.assert_allclose(edges, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(counts, [1, 2])  # 0.5 falls in the upper bin


def test_histogram_conservation_and_concentration():
    rng = np.random.Generator(np.random.PCG64(3))
    scores = rng.normal(size=137)
    _, counts = histogram(scores, bins=11)
    assert counts.sum() == 137
    _, counts = histogram(np.full(9, 2.5), bins=4, value_range=(0.0, 10.0))
    assert counts.tolist() == [0, 9, 0, 0]


def test_histogram_degenerate_range_error():
    with pytest.raises(DataError):
        histogram(np.ones(5), bins=3)


def test_histogram_csv_shape():
    edges, counts = histogram([0.0, 0.5, 1.0], bins=2)
    text = histogram_csv(edges, counts, 3)
    lines = text.strip().splitlines()
    assert lines[0] == "edge_lo,edge_hi,count,density"
    assert len(lines) == 3


def _identity_model(means):
    means = np.asarray(means, dtype=np.float64)
    k, d = means.shape
    return GaussianModel(
        means=means,
        chol=np.eye(d),
        class_labels=np.arange(k, dtype=np.int64),
        class_counts=np.full(k, 2, dtype=np.int64),
        reg_epsilon=1e-12,
        dim=d,
    )


def test_confusion_total_rejection():
    gm = _identity_model([[0.0, 0.0], [10.0, 0.0]])
    far = FeatureSet(np.full((5, 2), 1e4))
    counts = confusion_counts(gm, far, id_scores=np.linspace(0, 1, 20), tpr=0.95)
    assert counts == {0: 0, 1: 0}


def test_confusion_sample_at_mean():
    gm = _identity_model([[0.0, 0.0], [10.0, 0.0]])
    fs = FeatureSet(np.array([[10.0, 0.0]]))
    counts = confusion_counts(gm, fs, id_scores=np.linspace(0.5, 1.0, 20), tpr=0.95)
    assert counts == {0: 0, 1: 1}


def test_confusion_matches_per_sample_oracle():
    rng = np.random.Generator(np.random.PCG64(4))
    means = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    gm = _identity_model(means)
    # planted near-class-0 OOD cluster plus scattered far samples
    ood = np.concatenate(
        [rng.normal(loc=[0.8, 0.2], scale=0.4, size=(25, 2)),
         rng.normal(loc=[20.0, 20.0], scale=1.0, size=(15, 2))]
    )
    fs = FeatureSet(ood)
    id_scores = rng.chisquare(2, size=200)
    tpr = 0.95
    counts = confusion_counts(gm, fs, id_scores, tpr)

    t = threshold_at_tpr(id_scores, tpr)
    expected = {0: 0, 1: 0, 2: 0}
    accepted = 0
    for f in ood:
        if mahalanobis_score(gm, f) <= t:
            expected[predict_class(gm, f)] += 1
            accepted += 1
    assert counts == expected
    assert sum(counts.values()) == accepted
    assert counts[0] > 0  # the planted cluster is actually accepted


def test_confusion_dimension_mismatch():
    gm = _identity_model([[0.0, 0.0]])
    with pytest.raises(ShapeError):
        confusion_counts(gm, FeatureSet(np.ones((2, 3))), np.ones(5), 0.95)


def test_report_macro_average_and_round_trip(tmp_path):
    rng = np.random.Generator(np.random.PCG64(5))
    ids = rng.normal(size=50)
    ood_a = rng.normal(loc=3.0, size=40)
    ood_b = rng.normal(loc=1.0, size=30)
    report = build_report(ids, {"a": ood_a, "b": ood_b}, bins=10)
    expected = (auroc(ids, ood_a) + auroc(ids, ood_b)) / 2
    assert report.auroc == pytest.approx(expected, abs=1e-12)
    assert sum(report.id_histogram["counts"]) == 50
    assert sum(report.ood_histograms["a"]["counts"]) == 40
    assert sum(report.ood_histograms["b"]["counts"]) == 30

    single = build_report(ids, {"a": ood_a})
    assert single.auroc == pytest.approx(auroc(ids, ood_a), abs=1e-15)

    path = tmp_path / "report.json"
    report.save(path)
    back = EvalReport.from_json(path.read_text())
    assert json.loads(back.to_json()) == json.loads(report.to_json())


def test_report_with_confusion_sums_to_accepted():
    rng = np.random.Generator(np.random.PCG64(6))
    gm = _identity_model([[0.0, 0.0], [5.0, 5.0]])
    ood_feats = FeatureSet(rng.normal(size=(30, 2)) * 3)
    ids = rng.chisquare(2, size=100)
    oods = np.array([mahalanobis_score(gm, f) for f in ood_feats.features])
    report = build_report(
        ids, {"near": oods}, confusion_inputs=(gm, {"near": ood_feats})
    )
    t = report.threshold
    accepted = int(np.sum(oods <= t))
    assert sum(report.confusion["near"].values()) == accepted
