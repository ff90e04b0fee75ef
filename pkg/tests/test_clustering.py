import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from havana.clustering import kmeans, standardize_features
from havana.errors import ArgumentError


def test_constant_column_standardizes_to_zero():
    x = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    np.testing.assert_array_equal(standardize_features(x)[:, 1], 0)


def test_two_point_column():
    np.testing.assert_allclose(standardize_features(np.array([[0.0], [2.0]]))[:, 0], [-1, 1])


def test_random_matrix_moments():
    x = np.random.default_rng(0).normal(3, 7, size=(300, 4))
    z = standardize_features(x)
    assert np.all(np.abs(z.mean(axis=0)) < 1e-12)
    np.testing.assert_allclose(z.var(axis=0), 1, atol=1e-9)


def test_k1_is_mean():
    x = np.random.default_rng(1).normal(size=(50, 4))
    res = kmeans(x, 1, seed=0)
    np.testing.assert_allclose(res.centroids[0], x.mean(axis=0), atol=1e-12)
    assert res.inertia == pytest.approx(x.var(axis=0).sum() * len(x))


@pytest.mark.parametrize("seed", range(10))
def test_two_far_clusters_exact(seed):
    rng = np.random.default_rng(100 + seed)
    a = rng.normal(0, 1, (40, 4))
    b = rng.normal(0, 1, (60, 4)) + 100
    res = kmeans(np.concatenate([a, b]), 2, seed=seed)
    assert len(set(res.assignment[:40])) == 1 and len(set(res.assignment[40:])) == 1
    assert res.assignment[0] != res.assignment[40]


def test_k_distinct_values_zero_inertia():
    vals = np.array([[0.0, 0], [1, 1], [5, 0], [0, 9]])
    x = np.repeat(vals, 7, axis=0)
    res = kmeans(x, 4, seed=3)
    assert res.inertia == 0.0
    assert len(np.unique(res.assignment)) == 4


def test_too_few_points():
    with pytest.raises(ArgumentError):
        kmeans(np.zeros((3, 4)), 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 9))
def test_inertia_monotone_and_fixed_point(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(120, 4))
    res = kmeans(x, k, seed=seed)
    h = res.inertia_history
    assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(h, h[1:]))
    # one more assignment step does not move anything
    d2 = ((x[:, None] - res.centroids[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(d2.argmin(axis=1), res.assignment)


def test_deterministic_per_seed():
    x = np.random.default_rng(2).normal(size=(80, 4))
    a, b = kmeans(x, 5, seed=11), kmeans(x, 5, seed=11)
    np.testing.assert_array_equal(a.assignment, b.assignment)
    np.testing.assert_array_equal(a.centroids, b.centroids)
