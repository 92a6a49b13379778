import numpy as np
import pytest
from numpy.testing import assert_array_equal

from errors import CountError
from resampling import (EnnConfig, LabeledDataset, SamplingConfig, SamplingStrategy, SmoteConfig, apply_sampling,
                        enn_edit, random_undersample, smote_oversample, smoteenn)


def imbalanced(n_major=100, n_minor=20, dim=3, seed=0):
    r = np.random.default_rng(seed)
    x = np.vstack([r.normal(0.0, 1.0, size=(n_major, dim)), r.normal(4.0, 1.0, size=(n_minor, dim))])
    y = np.repeat([0, 1], [n_major, n_minor])
    return LabeledDataset(x, y)


def _on_some_segment(point, members, tol=1e-9):
    for a in members:
        d = members - a
        norms = np.einsum("ij,ij->i", d, d)
        ok = norms > 0
        t = np.clip((point - a) @ d[ok].T / norms[ok], 0.0, 1.0)
        residual = np.linalg.norm(a + t[:, None] * d[ok] - point, axis=1)
        if residual.min(initial=np.inf) <= tol:
            return True
    return False


def test_smote_balances_classes():
    out = smote_oversample(imbalanced(), seed=1)
    assert out.class_counts == {0: 100, 1: 100}
    assert out.has_synthetic


def test_smote_rows_lie_on_minority_segments():
    ds = imbalanced(seed=2)
    out = smote_oversample(ds, k_neighbors=5, seed=2)
    minority = ds.features[ds.labels == 1]
    synthetic = out.features[out.source_index < 0]
    assert synthetic.shape[0] == 80
    assert np.all(out.labels[out.source_index < 0] == 1)
    for point in synthetic:
        assert _on_some_segment(point, minority)


def test_smote_keeps_original_rows_bit_identical():
    ds = imbalanced(seed=3)
    out = smote_oversample(ds, seed=3)
    real = out.source_index >= 0
    assert_array_equal(out.source_index[real], np.arange(ds.n_rows))
    assert np.array_equal(out.features[real], ds.features[out.source_index[real]])
    assert_array_equal(out.labels[real], ds.labels)


def test_smote_target_ratio_and_noop():
    out = smote_oversample(imbalanced(), target_ratio=0.5, seed=0)
    assert out.class_counts == {0: 100, 1: 50}
    balanced = LabeledDataset(np.arange(8.0).reshape(4, 2), [0, 0, 1, 1])
    assert smote_oversample(balanced) is balanced


def test_smote_needs_enough_minority_rows():
    with pytest.raises(CountError):
        smote_oversample(imbalanced(n_minor=3), k_neighbors=5)


def test_resampling_needs_two_classes():
    single = LabeledDataset(np.zeros((5, 2)), np.zeros(5))
    with pytest.raises(CountError):
        smote_oversample(single)
    with pytest.raises(CountError):
        random_undersample(single)


@pytest.mark.parametrize("ratio, expected", [(1.0, {0: 20, 1: 20}), (2.0, {0: 40, 1: 20})])
def test_undersample_exact_counts(ratio, expected):
    ds = imbalanced()
    out = random_undersample(ds, target_ratio=ratio, seed=5)
    assert out.class_counts == expected
    assert not out.has_synthetic
    assert np.array_equal(out.features, ds.features[out.source_index])
    assert np.all(np.diff(out.source_index) > 0)


def test_undersample_is_seeded():
    ds = imbalanced()
    a = random_undersample(ds, seed=7).source_index
    assert_array_equal(a, random_undersample(ds, seed=7).source_index)
    assert not np.array_equal(a, random_undersample(ds, seed=8).source_index)


def test_undersample_rejects_impossible_targets():
    with pytest.raises(CountError):
        random_undersample(imbalanced(), target_ratio=10.0)


@pytest.mark.parametrize("seed", range(100))
def test_enn_removes_planted_majority_point(seed):
    r = np.random.default_rng(seed)
    major = r.normal(0.0, 0.5, size=(40, 2))
    minor = r.normal(10.0, 0.5, size=(15, 2))
    planted = np.array([[10.0, 10.0]])
    ds = LabeledDataset(np.vstack([major, minor, planted]), np.repeat([0, 1, 0], [40, 15, 1]))
    out = enn_edit(ds, k=3)
    assert 55 not in out.source_index
    assert np.sum(out.labels == 1) == 15


def test_enn_needs_more_rows_than_neighbors():
    with pytest.raises(CountError):
        enn_edit(LabeledDataset(np.zeros((3, 2)), [0, 1, 0]), k=3)


def test_smoteenn_oversamples_then_edits():
    ds = imbalanced(seed=4)
    out = smoteenn(ds, SmoteConfig(k_neighbors=5), EnnConfig(k=3), seed=4)
    assert out.class_counts[1] == 100
    assert out.class_counts[0] <= 100
    real = out.source_index >= 0
    assert np.array_equal(out.features[real], ds.features[out.source_index[real]])


def test_apply_sampling_dispatch():
    ds = imbalanced()
    assert apply_sampling(ds, SamplingStrategy.NONE) is ds
    assert apply_sampling(ds, "undersample", seed=1).class_counts == {0: 20, 1: 20}
    cfg = SamplingConfig(smote=SmoteConfig(target_ratio=0.5))
    assert apply_sampling(ds, SamplingStrategy.OVERSAMPLE, cfg).class_counts == {0: 100, 1: 50}


def test_take_keeps_timestamps():
    ds = LabeledDataset(np.arange(6.0).reshape(3, 2), [0, 1, 0], timestamps=np.array([10, 20, 30]))
    sub = ds.take(np.array([2, 0]))
    assert_array_equal(sub.timestamps, [30, 10])
    assert_array_equal(sub.source_index, [2, 0])
