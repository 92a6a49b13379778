import numpy as np
import pytest
from numpy.testing import assert_array_equal

from conftest import make_blobs
from errors import CountError, MappingError, ShapeError
from evaluation import (DetectionReport, evaluate_detection, linear_separability, map_clusters_to_labels,
                        micro_prf1, prf1, round_floats)


# ============================================================================
# Cluster mapping
# ============================================================================

def test_mapping_identity():
    m = map_clusters_to_labels([0, 0, 1, 1], [0, 0, 1, 1])
    assert m.mapping == {0: 0, 1: 1}
    assert m.accuracy == 1.0


def test_mapping_inverted():
    m = map_clusters_to_labels([1, 1, 0, 0], [0, 0, 1, 1])
    assert m.mapping == {0: 1, 1: 0}
    assert_array_equal(m.predictions, [0, 0, 1, 1])
    assert m.accuracy == 1.0


def test_mapping_best_of_both_bijections():
    m = map_clusters_to_labels([0, 0, 0, 1, 1, 1], [0, 0, 1, 1, 1, 0])
    assert m.accuracy == pytest.approx(4 / 6)
    assert m.mapping == {0: 0, 1: 1}


def test_mapping_tie_prefers_identity():
    m = map_clusters_to_labels([0, 1, 0, 1], [0, 0, 1, 1])
    assert m.accuracy == 0.5
    assert m.mapping == {0: 0, 1: 1}


def test_mapping_single_cluster():
    m = map_clusters_to_labels([1, 1, 1], [0, 0, 1])
    assert m.mapping == {1: 0}
    assert m.accuracy == pytest.approx(2 / 3)


def test_mapping_too_many_clusters():
    with pytest.raises(MappingError):
        map_clusters_to_labels([0, 1, 2], [0, 1, 1])


# ============================================================================
# Precision / recall / F1
# ============================================================================

def test_prf1_perfect():
    m = prf1([0, 1, 1, 0], [0, 1, 1, 0])
    assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)
    assert m.support == 2 and not m.degenerate


def test_prf1_counts_example():
    # TP=3, FP=1, FN=2, TN=1
    pred = [1, 1, 1, 1, 0, 0, 0]
    true = [1, 1, 1, 0, 1, 1, 0]
    m = prf1(pred, true)
    assert m.precision == pytest.approx(0.75)
    assert m.recall == pytest.approx(0.6)
    assert m.f1 == pytest.approx(2 * 0.45 / 1.35)


def test_prf1_no_positive_predictions_is_degenerate():
    m = prf1([0, 0, 0], [1, 0, 1])
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    assert m.degenerate


def test_prf1_validates_input():
    with pytest.raises(CountError):
        prf1([], [])
    with pytest.raises(ShapeError):
        prf1([0, 1], [0])


@pytest.mark.parametrize("seed", range(50))
def test_prf1_agrees_with_direct_counting(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 40))
    pred, true = r.integers(0, 2, n), r.integers(0, 2, n)
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    m = prf1(pred, true)
    assert m.precision == (tp / (tp + fp) if tp + fp else 0.0)
    assert m.recall == (tp / (tp + fn) if tp + fn else 0.0)
    p, rc = m.precision, m.recall
    assert m.f1 == pytest.approx(2 * p * rc / (p + rc) if p + rc else 0.0)
    assert m.support == tp + fn


def test_micro_example():
    m = micro_prf1([1, 1, 0, 0], [1, 0, 1, 0])
    assert (m.precision, m.recall, m.f1) == (0.5, 0.5, 0.5)


@pytest.mark.parametrize("seed", range(100))
def test_micro_metrics_are_all_equal(seed):
    r = np.random.default_rng(seed)
    n, c = int(r.integers(1, 60)), int(r.integers(2, 5))
    pred, true = r.integers(0, c, n), r.integers(0, c, n)
    m = micro_prf1(pred, true)
    assert m.precision == m.recall == m.f1
    assert m.f1 == pytest.approx(np.mean(pred == true))


# ============================================================================
# Reports
# ============================================================================

def test_report_is_invariant_to_cluster_relabeling(rng):
    true = rng.integers(0, 2, 80)
    clusters = np.where(rng.random(80) < 0.8, true, 1 - true)
    a = evaluate_detection(clusters, true, arm="baseline")
    b = evaluate_detection(1 - clusters, true, arm="baseline")
    assert a.per_class == b.per_class
    assert a.micro == b.micro
    assert a.confusion == b.confusion


def test_ocsvm_flags_map_by_identity():
    report = evaluate_detection([1, 0, 0, 1], [1, 0, 0, 0], arm="transfer", is_clustering=False)
    assert report.mapping == {0: 0, 1: 1}
    assert report.anomalous.precision == 0.5
    assert report.anomalous.recall == 1.0
    assert report.confusion == [[2, 1], [0, 1]]


def test_report_without_positives_keeps_the_positive_class():
    report = evaluate_detection([0, 0, 1], [0, 0, 0], arm="baseline")
    assert set(report.per_class) == {0, 1}
    assert report.anomalous.degenerate


def test_report_round_trips_through_dict():
    x, y = make_blobs(n_per_blob=30, seed=1)
    report = evaluate_detection(y, y, arm="transfer", latents=x, seed=2, config_hash="abc",
                                metadata={"evidence": ["flood"]})
    data = report.to_dict()
    assert set(data["per_class"]) == {"0", "1"}
    restored = DetectionReport.from_dict(data)
    assert restored == DetectionReport.from_dict(restored.to_dict())
    assert restored.separability == 1.0
    assert restored.metadata == {"evidence": ["flood"]}
    assert restored.config_hash == "abc"


def test_round_floats():
    data = {"a": np.float64(1 / 3), "b": [np.int64(2), (0.1234567891, True)], "c": np.bool_(False)}
    assert round_floats(data) == {"a": 0.333333, "b": [2, [0.123457, True]], "c": False}


def test_empty_detection_is_rejected():
    with pytest.raises(CountError):
        evaluate_detection([], [], arm="baseline")


def test_separability_probe(two_blobs):
    x, y = two_blobs
    assert linear_separability(x, y) == 1.0
    assert linear_separability(x, np.zeros_like(y)) is None
