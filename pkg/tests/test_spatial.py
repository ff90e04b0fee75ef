import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from havana.cloud import PointCloud, extract_sphere
from havana.errors import ArgumentError
from havana.spatial import SpatialIndex, build_index, knn, radius_query
from oracles import brute_knn, brute_radius


def test_collinear_self_nearest():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.5, 0, 0]])
    idx = build_index(pts)
    for i in range(3):
        assert knn(idx, pts[i], 1).tolist() == [i]


def test_equidistant_tie_smaller_index_first():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    assert knn(build_index(pts), np.zeros(3), 3).tolist() == [0, 1, 2]


def test_radius_zero_exact_matches_only():
    pts = np.array([[0.0, 0, 0], [1e-9, 0, 0], [0.0, 0, 0]])
    assert radius_query(build_index(pts), np.zeros(3), 0.0).tolist() == [0, 2]


@pytest.mark.parametrize("k", [1, 5, 20])
def test_knn_matches_linear_scan_200(k):
    rng = np.random.default_rng(k)
    pts = rng.random((200, 3))
    idx = build_index(pts)
    for q in rng.random((30, 3)):
        assert idx.knn(q, k).tolist() == brute_knn(pts, q, k)


def test_knn_batch_500_points_with_duplicates():
    rng = np.random.default_rng(7)
    pts = np.round(rng.random((500, 3)) * 4) / 4  # lattice: many exact ties
    idx = build_index(pts)
    out = idx.knn_batch(pts, 8)
    for i in range(0, 500, 7):
        assert out[i].tolist() == brute_knn(pts, pts[i], 8)


def test_k_larger_than_n_returns_all():
    pts = np.random.default_rng(0).random((5, 3))
    assert sorted(build_index(pts).knn(np.zeros(3), 50).tolist()) == list(range(5))


def test_invalid_arguments():
    with pytest.raises(ArgumentError):
        SpatialIndex(np.zeros((0, 3)))
    with pytest.raises(ArgumentError):
        build_index(np.zeros((3, 3))).knn(np.zeros(3), 0)
    with pytest.raises(ArgumentError):
        build_index(np.zeros((3, 3))).radius(np.zeros(3), -1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.5), st.integers(1, 30))
def test_radius_and_knn_property(seed, r, k):
    rng = np.random.default_rng(seed)
    pts = np.round(rng.random((200, 3)), 2)
    q = np.round(rng.random(3), 2)
    idx = build_index(pts)
    assert idx.radius(q, r).tolist() == brute_radius(pts, q, r)
    assert idx.knn(q, k).tolist() == brute_knn(pts, q, k)


def test_sphere_matches_distance_filter():
    rng = np.random.default_rng(4)
    cloud = PointCloud(rng.uniform(0, 3, (100, 3)))
    idx = build_index(cloud)
    for c in rng.uniform(0, 3, (10, 3)):
        try:
            block = extract_sphere(cloud, idx, c, 1.0)
            got = set(block.indices.tolist())
        except Exception:
            got = set()
        assert got == set(brute_radius(cloud.positions, c, 1.0))
