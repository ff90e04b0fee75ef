"""Exact nearest-neighbour and radius queries over a fixed point set.

The tree itself is scipy's balanced cKDTree; this wrapper re-ranks every
candidate set with one fixed squared-distance formula and breaks distance ties
by the smaller point index, so results are identical to a linear scan.
"""

import numpy as np
from scipy.spatial import cKDTree

from .errors import ArgumentError

# candidate radii are inflated by this relative amount so that points whose
# distance rounds differently inside the tree are never lost
_SLACK = 1e-9


def squared_distances(points, query):
    """Squared Euclidean distances from ``query`` to each row of ``points``."""
    diff = points - query
    return (diff * diff).sum(axis=-1)


class SpatialIndex:
    """Read-only acceleration structure over an ``(n, 3)`` point array."""

    def __init__(self, points):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ArgumentError(f"expected an (n, 3) array, got shape {points.shape}")
        if len(points) == 0:
            raise ArgumentError("cannot index an empty point set")
        self.points = points
        self.points.setflags(write=False)
        self._tree = cKDTree(points, balanced_tree=True)

    def __len__(self):
        return len(self.points)

    def knn(self, query, k):
        """Indices of the ``k`` nearest points, closest first, ties by index."""
        if k < 1:
            raise ArgumentError("k must be >= 1")
        query = np.asarray(query, dtype=np.float64)
        return self.knn_batch(query[None, :], k)[0]

    def knn_batch(self, queries, k):
        """Row-wise :meth:`knn` for an ``(m, 3)`` array; returns ``(m, min(k, n))``."""
        if k < 1:
            raise ArgumentError("k must be >= 1")
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        n = len(self.points)
        m = len(queries)
        if m == 0:
            return np.zeros((0, min(k, n)), dtype=np.int64)
        if k >= n:
            idx = np.broadcast_to(np.arange(n), (m, n))
            return self._rank(queries, idx)

        # one spare candidate tells us whether the k-th slot is contested
        _, cand = self._tree.query(queries, k=k + 1)
        cand = np.asarray(cand, dtype=np.int64).reshape(m, k + 1)
        ranked, d2 = self._rank(queries, cand, return_d2=True)
        out = ranked[:, :k].copy()
        kth = d2[:, k - 1]
        spare = d2[:, k]
        unsure = spare <= kth * (1 + 4 * _SLACK) + 1e-300
        for row in np.flatnonzero(unsure):
            out[row] = self._knn_exhaustive_shell(queries[row], k, kth[row])
        return out

    def _knn_exhaustive_shell(self, q, k, kth_d2):
        r = np.sqrt(kth_d2) * (1 + _SLACK) + 1e-12
        cand = np.asarray(self._tree.query_ball_point(q, r), dtype=np.int64)
        ranked = self._rank(q[None, :], cand[None, :])[0]
        return ranked[:k]

    def _rank(self, queries, cand, return_d2=False):
        d2 = squared_distances(self.points[cand], queries[:, None, :])
        order = np.lexsort((cand, d2), axis=-1)
        ranked = np.take_along_axis(cand, order, axis=-1)
        if return_d2:
            return ranked, np.take_along_axis(d2, order, axis=-1)
        return ranked

    def radius(self, query, r):
        """Indices of all points within distance ``r`` of ``query``, ascending."""
        if r < 0:
            raise ArgumentError("radius must be >= 0")
        query = np.asarray(query, dtype=np.float64)
        cand = np.asarray(
            self._tree.query_ball_point(query, r * (1 + _SLACK) + 1e-12), dtype=np.int64
        )
        if len(cand) == 0:
            return cand
        d2 = squared_distances(self.points[cand], query)
        keep = cand[d2 <= r * r]
        keep.sort()
        return keep


def build_index(cloud):
    """Build a :class:`SpatialIndex` over a PointCloud (or raw ``(n, 3)`` array)."""
    points = getattr(cloud, "positions", cloud)
    return SpatialIndex(points)


def knn(index, query, k):
    return index.knn(query, k)


def radius_query(index, query, r):
    return index.radius(query, r)
