"""Local covariance tensors and eigenvalue-based geometric features."""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .spatial import build_index

FEATURE_NAMES = ("planarity", "surface_variation", "verticality", "normal_z_abs")
DEFAULT_NEIGHBORS = 20
_MEDOID_CHUNK = 1 << 20


@dataclass
class EigenResult:
    lambdas: np.ndarray  # (3,) descending
    eigvecs: np.ndarray  # (3, 3); row i is e_{i+1}


@dataclass
class GeometricFeatureSet:
    planarity: np.ndarray
    surface_variation: np.ndarray
    verticality: np.ndarray
    normal_z_abs: np.ndarray
    lambdas: np.ndarray  # (n, 3)
    eigvecs: np.ndarray  # (n, 3, 3), rows e1, e2, e3
    neighbor_count: int

    def __len__(self):
        return len(self.planarity)

    @property
    def normals(self):
        return self.eigvecs[:, 2, :]

    def as_matrix(self):
        """(n, 4) matrix in :data:`FEATURE_NAMES` order."""
        return np.stack(
            [self.planarity, self.surface_variation, self.verticality, self.normal_z_abs], axis=1
        )


def medoid_positions(neigh):
    """Index (into axis 1) of the medoid of each ``(n, N, 3)`` neighbourhood."""
    n, N, _ = neigh.shape
    out = np.empty(n, dtype=np.int64)
    step = max(1, _MEDOID_CHUNK // max(1, N * N))  # bounds the (step, N, N) buffer
    for s in range(0, n, step):
        part = neigh[s : s + step]
        diff = part[:, :, None, :] - part[:, None, :, :]
        total = np.sqrt((diff * diff).sum(axis=-1)).sum(axis=-1)
        out[s : s + step] = total.argmin(axis=1)
    return out


def covariance_batch(neigh, center="medoid"):
    """Covariance tensors of ``(n, N, 3)`` neighbourhoods.

    ``center`` selects the reference point: ``"medoid"`` (a member minimising
    the summed distance to the others) or ``"mean"``.
    """
    n, N, _ = neigh.shape
    if N < 3:
        return np.zeros((n, 3, 3))
    if center == "medoid":
        ref = neigh[np.arange(n), medoid_positions(neigh)]
    elif center == "mean":
        ref = neigh.mean(axis=1)
    else:
        raise ArgumentError(f"unknown centering {center!r}")
    dev = neigh - ref[:, None, :]
    return np.einsum("nki,nkj->nij", dev, dev) / N


def covariance(cloud, point_index, neighbor_count=DEFAULT_NEIGHBORS, index=None, center="medoid"):
    """Covariance tensor of the ``neighbor_count`` nearest neighbours of one point."""
    positions = getattr(cloud, "positions", cloud)
    index = index if index is not None else build_index(positions)
    nbrs = index.knn(positions[point_index], neighbor_count)
    return covariance_batch(positions[nbrs][None], center=center)[0]


def _orient(vecs):
    # flip each vector so that its largest-magnitude component is positive
    big = np.abs(vecs).argmax(axis=-1)
    sign = np.sign(np.take_along_axis(vecs, big[..., None], axis=-1))
    sign[sign == 0] = 1.0
    return vecs * sign


def eigh_sym3_batch(mats):
    """Descending eigenpairs of a stack of symmetric 3x3 matrices.

    Returns ``(lambdas (n, 3), eigvecs (n, 3, 3))`` with eigenvectors as rows.
    """
    w, v = np.linalg.eigh(mats)
    w = w[:, ::-1]
    vecs = np.swapaxes(v, -1, -2)[:, ::-1, :]
    return np.maximum(w, 0.0), _orient(vecs)


def eigendecompose_sym3(m, tol=1e-10):
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ArgumentError(f"expected a 3x3 matrix, got {m.shape}")
    if np.max(np.abs(m - m.T)) > tol:
        raise ArgumentError("matrix is not symmetric")
    w, v = eigh_sym3_batch(m[None])
    return EigenResult(w[0], v[0])


def features_from_eigen(lambdas, eigvecs):
    l1, l2, l3 = lambdas[:, 0], lambdas[:, 1], lambdas[:, 2]
    total = l1 + l2 + l3
    ok = (l1 > 0) & (total > 0)
    safe1 = np.where(ok, l1, 1.0)
    safe_sum = np.where(ok, total, 1.0)
    nz = np.abs(eigvecs[:, 2, 2])
    planarity = np.where(ok, (l2 - l3) / safe1, 0.0)
    variation = np.where(ok, l3 / safe_sum, 0.0)
    verticality = np.where(ok, 1.0 - nz, 0.0)
    normal_z = np.where(ok, nz, 0.0)
    return planarity, variation, verticality, normal_z


def compute_features(cloud, index=None, neighbor_count=DEFAULT_NEIGHBORS, center="medoid"):
    """Planarity, surface variation, verticality and |normal z| for every point.

    Neighbourhoods with a zero leading eigenvalue produce all-zero features.
    """
    positions = getattr(cloud, "positions", cloud)
    if len(positions) == 0:
        raise ArgumentError("cannot compute features of an empty cloud")
    index = index if index is not None else build_index(positions)
    nbrs = index.knn_batch(positions, neighbor_count)
    cov = covariance_batch(positions[nbrs], center=center)
    lambdas, vecs = eigh_sym3_batch(cov)
    planarity, variation, verticality, normal_z = features_from_eigen(lambdas, vecs)
    return GeometricFeatureSet(
        planarity, variation, verticality, normal_z, lambdas, vecs, nbrs.shape[1]
    )
