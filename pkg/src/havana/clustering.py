"""k-means pseudo labels over standardized geometric features."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError

DEFAULT_K = 9


@dataclass
class PseudoLabels:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    def __len__(self):
        return len(self.assignment)


def standardize_features(features):
    """Zero-mean, unit-variance columns; constant columns become 0."""
    x = features.as_matrix() if hasattr(features, "as_matrix") else np.asarray(features, float)
    if len(x) == 0:
        raise ArgumentError("need at least one row")
    mean = x.mean(axis=0)
    centered = x - mean
    std = np.sqrt((centered * centered).mean(axis=0))
    out = np.zeros_like(centered)
    live = std > 0
    out[:, live] = centered[:, live] / std[live]
    return out


def _sq_dists(x, centroids):
    diff = x[:, None, :] - centroids[None, :, :]
    return (diff * diff).sum(axis=-1)


def _plusplus(x, k, rng):
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt : nxt + 1])[:, 0])
    return x[chosen].copy()


def _inertia(x, assignment, centroids):
    diff = x - centroids[assignment]
    return float((diff * diff).sum())


def kmeans(data, k=DEFAULT_K, max_iter=100, seed=0):
    """Lloyd's algorithm from k-means++ seeds.

    Stops once the assignment is a fixed point or after ``max_iter`` rounds.
    Assignment ties go to the lower centroid id; an emptied cluster is
    re-seeded at the point farthest from its current centroid.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k < 1:
        raise ArgumentError("k must be >= 1")
    if n < k:
        raise ArgumentError(f"need at least k={k} points, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    centroids = _plusplus(x, k, rng)
    assignment = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centroids)
        new = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new].sum()))
        if assignment is not None and np.array_equal(new, assignment):
            break
        assignment = new
        counts = np.bincount(assignment, minlength=k)
        for dim in range(x.shape[1]):
            sums = np.bincount(assignment, weights=x[:, dim], minlength=k)
            centroids[counts > 0, dim] = sums[counts > 0] / counts[counts > 0]
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            resid = ((x - centroids[assignment]) ** 2).sum(axis=1)
            order = np.argsort(-resid, kind="stable")
            for c, p in zip(empty, order):
                centroids[c] = x[p]
    else:
        # max_iter exhausted: report the assignment matching the final centroids
        assignment = _sq_dists(x, centroids).argmin(axis=1)

    return PseudoLabels(
        assignment=assignment.astype(np.int64),
        centroids=centroids,
        inertia=_inertia(x, assignment, centroids),
        n_iter=it,
        inertia_history=history,
    )
