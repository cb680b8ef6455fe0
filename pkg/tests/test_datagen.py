import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from unifed.datagen import (ClientDistributionSpec, Dataset, collinear_pairs, holdout_split,
                            make_feature_shift_suite, make_teacher, make_unseen_spec, mean_covariance, read_csv,
                            sample_client_dataset, split_sizes, write_csv)
from unifed.linalg import is_positive_definite


def test_identity_covariance_sample(rng):
    spec = ClientDistributionSpec(0, np.eye(5))
    ds = sample_client_dataset(spec, make_teacher("linear-regression", 5, 0), 10_000, seed=1)
    C = np.cov(ds.inputs.T)
    assert np.linalg.norm(C - np.eye(5)) < 0.1


def test_noiseless_linear_labels():
    teacher = make_teacher("linear-regression", 4, 3)
    ds = sample_client_dataset(ClientDistributionSpec(0, 2 * np.eye(4)), teacher, 50, seed=2)
    assert np.array_equal(ds.labels, ds.inputs @ teacher.weights)


def test_variance_ratio_between_clients():
    teacher = make_teacher("linear-regression", 3, 0)
    a = sample_client_dataset(ClientDistributionSpec(0, np.eye(3)), teacher, 10_000, 5)
    b = sample_client_dataset(ClientDistributionSpec(1, 4 * np.eye(3)), teacher, 10_000, 5)
    ratio = b.inputs.var(axis=0) / a.inputs.var(axis=0)
    assert np.all(np.abs(ratio - 4.0) < 0.3)


def test_classification_labels_are_signs():
    teacher = make_teacher("linear-classification", 6, 0)
    ds = sample_client_dataset(ClientDistributionSpec(0, np.eye(6)), teacher, 200, 0)
    assert set(np.unique(ds.labels)) <= {-1.0, 1.0}
    assert np.array_equal(ds.labels, np.where(ds.inputs @ teacher.weights >= 0, 1.0, -1.0))
    binary = make_teacher("two-layer-teacher", 6, 0, binary=True)
    assert binary.is_classification
    assert set(np.unique(binary.label(ds.inputs))) <= {-1.0, 1.0}


def test_noise_requires_generator():
    teacher = make_teacher("linear-regression", 3, 0, noise_std=0.5)
    with pytest.raises(ValueError):
        teacher.label(np.ones((2, 3)))


def test_sampling_is_deterministic():
    spec = ClientDistributionSpec(2, np.diag([1.0, 2.0, 3.0]))
    teacher = make_teacher("linear-regression", 3, 0, noise_std=0.1)
    a = sample_client_dataset(spec, teacher, 40, 9)
    b = sample_client_dataset(spec, teacher, 40, 9)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert a.client_id == 2


def test_collinearity_invariant():
    X = np.array([[1.0, 0.0], [0.0, 1.0], [-2.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
    assert collinear_pairs(X) == {2, 4}
    spec = ClientDistributionSpec(0, np.eye(2))
    ds = sample_client_dataset(spec, make_teacher("linear-regression", 2, 0), 200, 0)
    assert not collinear_pairs(ds.inputs)


def test_scale_suite_formula():
    specs = make_feature_shift_suite(2, 4, "scale", 3.0, 0)
    ratio = specs[1].covariance[0, 0] / specs[0].covariance[0, 0]
    assert ratio == pytest.approx((1 + 3.0) / (1 + 1.5))
    for s in specs:
        assert np.allclose(s.covariance, s.covariance[0, 0] * np.eye(4))


@pytest.mark.parametrize("shift", ["scale", "rotate", "anisotropic"])
def test_suite_covariances_are_pd(shift):
    for s in make_feature_shift_suite(4, 6, shift, 2.0, 1):
        assert is_positive_definite(s.covariance)
        assert np.allclose(s.covariance, s.covariance.T)


def test_severity_limits():
    with pytest.raises(ValueError):
        make_feature_shift_suite(3, 4, "scale", 0.0, 0)
    specs = make_feature_shift_suite(3, 4, "rotate", 1e-9, 0)
    for s in specs[1:]:
        assert np.allclose(s.covariance, specs[0].covariance, atol=1e-8)


def test_unknown_shift_and_small_suite():
    with pytest.raises(ValueError):
        make_feature_shift_suite(3, 4, "shear", 1.0, 0)
    with pytest.raises(ValueError):
        make_feature_shift_suite(1, 4, "scale", 1.0, 0)


def test_unseen_spec_scales_mean_covariance():
    specs = make_feature_shift_suite(3, 4, "anisotropic", 1.0, 0)
    un = make_unseen_spec(specs, 4.0)
    assert np.allclose(un.covariance, 4.0 * mean_covariance(specs))
    assert un.client_id == 3
    with pytest.raises(ValueError):
        make_unseen_spec(specs, 0.0)


def test_split_sizes_example():
    assert split_sizes(10, (0.7, 0.1, 0.2)) == [7, 1, 2]
    ds = Dataset(np.arange(20.0).reshape(10, 2), np.arange(10.0))
    with pytest.raises(ValueError):
        holdout_split(ds, (1.0, 0.0, 0.0))


@given(st.integers(3, 60), st.integers(0, 1000))
def test_split_is_a_partition(M, seed):
    ds = Dataset(np.random.default_rng(seed).standard_normal((M, 2)), np.arange(M, dtype=float), 1)
    try:
        parts = holdout_split(ds, (0.6, 0.2, 0.2), seed)
    except ValueError:
        assert min(split_sizes(M, (0.6, 0.2, 0.2))) <= 0
        return
    joined = np.sort(np.concatenate([p.indices for p in parts]))
    assert np.array_equal(joined, np.arange(M))
    for p in parts:
        assert np.array_equal(p.labels, p.indices.astype(float))


def test_csv_roundtrip(tmp_path):
    teacher = make_teacher("linear-regression", 3, 0)
    sets = [sample_client_dataset(s, teacher, 7, 0) for s in make_feature_shift_suite(2, 3, "scale", 1.0, 0)]
    path = tmp_path / "data.csv"
    write_csv(path, sets)
    back = read_csv(path)
    assert [b.client_id for b in back] == [0, 1]
    for a, b in zip(sets, back):
        assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)


def test_dataset_shape_check():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(4))
