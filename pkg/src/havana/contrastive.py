"""Block pairs, positive/negative mining and the hinge contrastive loss.

Two negative-mining strategies are supported:

``hardest``
    the candidate closest to the anchor in embedding space.
``abspan``
    walk the candidates in ascending embedding distance and take the first
    whose pseudo label differs from the pseudo label of the anchor's positive
    match; anchors that exhaust their candidates are marked invalid.

In both cases the anchor's own positive match is never a candidate.
"""

from dataclasses import dataclass

import numpy as np

from .cloud import apply_transform, extract_sphere, sample_transform
from .encoder import as_float
from .errors import ArgumentError, DataError, EmptyBlockError, NumericError

STRATEGIES = ("abspan", "hardest")
MAX_CENTER_RETRIES = 32
# candidates examined before falling back to a full ranking of a row
_SHORTLIST = 64


@dataclass
class MiningConfig:
    n_positive: int = 4096
    n_negative_anchors: int = 2048
    t_p: float = 0.2
    t_n: float = 2.0
    strategy: str = "abspan"
    normalize: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ArgumentError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.n_positive < 1 or self.n_negative_anchors < 0:
            raise ArgumentError("pair counts must be positive")
        if self.n_negative_anchors > self.n_positive:
            raise ArgumentError("n_negative_anchors must not exceed n_positive")
        if not self.t_n > self.t_p > 0:
            raise ArgumentError("margins must satisfy t_n > t_p > 0")


@dataclass
class PairSet:
    """Mined pairs between block 1 and block 2.

    ``neg1_*`` describe block-2 negatives for block-1 anchors ``i``;
    ``neg2_*`` describe block-1 negatives for block-2 anchors ``j``.
    """

    positives: np.ndarray  # (m, 2) int: (i, j)
    neg1_anchor: np.ndarray
    neg1_k: np.ndarray
    neg1_valid: np.ndarray
    neg2_anchor: np.ndarray
    neg2_k: np.ndarray
    neg2_valid: np.ndarray
    strategy: str = "abspan"

    @property
    def n_theta(self):
        return len(self.positives)

    @property
    def n_theta_i(self):
        return int(self.neg1_valid.sum())

    @property
    def n_theta_j(self):
        return int(self.neg2_valid.sum())

    def valid_negatives(self):
        """Valid negative pairs as ``(block1_index, block2_index)`` arrays."""
        v1, v2 = self.neg1_valid, self.neg2_valid
        b1 = np.concatenate([self.neg1_anchor[v1], self.neg2_k[v2]])
        b2 = np.concatenate([self.neg1_k[v1], self.neg2_anchor[v2]])
        return b1, b2


def generate_block_pair(cloud, index, radius, rng, rot_range=(0.0, 360.0), scale_range=(0.8, 1.2)):
    """Two independently transformed copies of one random sphere.

    Returns ``(block1, block2, correspondences)`` where correspondences is the
    identity pairing over the sphere's points.
    """
    n = len(cloud)
    if n == 0:
        raise DataError("cloud is empty")
    for _ in range(MAX_CENTER_RETRIES):
        center = cloud.positions[int(rng.integers(n))]
        try:
            block = extract_sphere(cloud, index, center, radius)
        except EmptyBlockError:
            continue
        if len(block) >= 2:
            break
    else:
        raise DataError(f"no sphere of radius {radius} with >= 2 points after {MAX_CENTER_RETRIES} tries")
    b1 = apply_transform(block, sample_transform(rng, rot_range, scale_range))
    b2 = apply_transform(block, sample_transform(rng, rot_range, scale_range))
    ids = np.arange(len(block))
    return b1, b2, np.stack([ids, ids], axis=1)


def mine_positives(correspondences, n_positive, rng):
    corr = np.asarray(correspondences, dtype=np.int64).reshape(-1, 2)
    if len(corr) == 0:
        raise ArgumentError("no correspondences to sample from")
    m = min(n_positive, len(corr))
    pick = rng.choice(len(corr), size=m, replace=False)
    return corr[pick]


def _unit_rows(v):
    norm = np.sqrt((v * v).sum(axis=1, keepdims=True))
    return v / np.where(norm > 0, norm, 1.0)


def pairwise_distances(a, b):
    """Euclidean distances between rows of ``a`` and rows of ``b``."""
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(d2, 0.0))


def _walk(dist, own, ref_labels, cand_labels, filtered):
    """First admissible candidate per row in (distance, index) order.

    ``own`` is the column excluded per row (the positive match). When
    ``filtered`` the candidate label must differ from every array in
    ``ref_labels`` (one label per row each). Returns ``(k, valid)``.
    """
    rows, n = dist.shape
    dist = dist.copy()
    dist[np.arange(rows), own] = np.inf
    admissible = np.isfinite(dist)
    if filtered:
        for ref in ref_labels:
            admissible &= cand_labels[None, :] != ref[:, None]

    k = np.zeros(rows, dtype=np.int64)
    valid = np.zeros(rows, dtype=bool)
    todo = np.ones(rows, dtype=bool)
    s = min(_SHORTLIST, n)
    if s < n:
        part = np.argpartition(dist, s, axis=1)
        short = part[:, :s]
        bound = dist[np.arange(rows), part[:, s]]
        sd = np.take_along_axis(dist, short, axis=1)
        order = np.lexsort((short, sd), axis=1)
        short = np.take_along_axis(short, order, axis=1)
        sd = np.take_along_axis(sd, order, axis=1)
        ok = np.take_along_axis(admissible, short, axis=1)
        # the shortlist is trusted only when its hit lies strictly below every
        # excluded distance, otherwise a lower-index tie may be hiding outside
        hit = ok.argmax(axis=1)
        found = ok.any(axis=1)
        hit_d = sd[np.arange(rows), hit]
        sure = found & (hit_d < bound)
        k[sure] = short[sure, hit[sure]]
        valid[sure] = True
        todo = ~sure
    for r in np.flatnonzero(todo):
        order = np.lexsort((np.arange(n), dist[r]))
        ok = admissible[r, order]
        if ok.any():
            k[r] = order[ok.argmax()]
            valid[r] = True
    return k, valid


def _split_labels(pseudo, n1, n2):
    if pseudo is None:
        return None, None
    if isinstance(pseudo, tuple):
        l1, l2 = pseudo
    else:
        a = np.asarray(getattr(pseudo, "assignment", pseudo))
        if len(a) != n1 + n2:
            raise ArgumentError("pseudo labels must cover both blocks (block 1 first)")
        l1, l2 = a[:n1], a[n1:]
    l1, l2 = np.asarray(l1), np.asarray(l2)
    if len(l1) != n1 or len(l2) != n2:
        raise ArgumentError("pseudo label lengths do not match the embeddings")
    return l1, l2


def mine_negatives(v1, v2, positives, pseudo, cfg, rng):
    """Sample anchors from ``positives`` and mine one negative per direction.

    ``pseudo`` is either a :class:`~havana.clustering.PseudoLabels` computed on
    the concatenation (block 1, block 2) or a tuple of two label arrays. It may
    be ``None`` for the hardest strategy.
    """
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    l1, l2 = _split_labels(pseudo, len(v1), len(v2))
    filtered = cfg.strategy == "abspan"
    if filtered and l1 is None:
        raise ArgumentError("the abspan strategy needs pseudo labels")

    n_anchor = min(cfg.n_negative_anchors, len(positives))
    anchors = positives[rng.choice(len(positives), size=n_anchor, replace=False)]
    ai, aj = anchors[:, 0], anchors[:, 1]
    if cfg.normalize:
        v1, v2 = _unit_rows(v1), _unit_rows(v2)

    empty = np.zeros(0, dtype=np.int64)
    if n_anchor == 0:
        k1 = k2 = empty
        ok1 = ok2 = np.zeros(0, dtype=bool)
    else:
        # a candidate must leave the cluster of the positive match; it must
        # also leave the anchor's own cluster, which differs from the match's
        # only for points on a cluster boundary
        refs1 = (l2[aj], l1[ai]) if filtered else ()
        refs2 = (l1[ai], l2[aj]) if filtered else ()
        k1, ok1 = _walk(pairwise_distances(v1[ai], v2), aj, refs1, l2, filtered)
        k2, ok2 = _walk(pairwise_distances(v2[aj], v1), ai, refs2, l1, filtered)
    return PairSet(positives, ai, k1, ok1, aj, k2, ok2, cfg.strategy)


def _dist_and_unit(a, b):
    diff = a - b
    d = np.sqrt((diff * diff).sum(axis=1))
    unit = diff / np.where(d > 0, d, 1.0)[:, None]
    return d, unit


def contrastive_loss(v1, v2, pairs, cfg, grads=True):
    """Hinge contrastive loss and its gradients w.r.t. both embedding batches.

    The mined selection in ``pairs`` is treated as constant.
    Returns ``(loss, d_v1, d_v2)``; both gradients are ``None`` when
    ``grads`` is false.
    """
    raw1, raw2 = as_float(v1), as_float(v2)
    if not (np.all(np.isfinite(raw1)) and np.all(np.isfinite(raw2))):
        raise NumericError("embeddings contain non-finite values")
    e1, e2 = (_unit_rows(raw1), _unit_rows(raw2)) if cfg.normalize else (raw1, raw2)
    g1 = np.zeros_like(e1) if grads else None
    g2 = np.zeros_like(e2) if grads else None
    loss = np.zeros((), dtype=np.result_type(e1, e2))[()]

    pos = pairs.positives
    if len(pos):
        i, j = pos[:, 0], pos[:, 1]
        d, u = _dist_and_unit(e1[i], e2[j])
        h = np.maximum(d - cfg.t_p, 0.0)
        n = len(pos)
        loss += (h * h).sum() / n
        if grads:
            g = (2.0 * h / n)[:, None] * u
            np.add.at(g1, i, g)
            np.add.at(g2, j, -g)

    for anchor, k, valid, direction in (
        (pairs.neg1_anchor, pairs.neg1_k, pairs.neg1_valid, 1),
        (pairs.neg2_anchor, pairs.neg2_k, pairs.neg2_valid, 2),
    ):
        count = int(valid.sum())
        if count == 0:
            continue
        a, k = anchor[valid], k[valid]
        p1, p2 = (a, k) if direction == 1 else (k, a)
        d, u = _dist_and_unit(e1[p1], e2[p2])
        h = np.maximum(cfg.t_n - d, 0.0)
        loss += 0.5 * (h * h).sum() / count
        if grads:
            g = (-h / count)[:, None] * u
            np.add.at(g1, p1, g)
            np.add.at(g2, p2, -g)

    if not grads:
        return loss, None, None
    if cfg.normalize:
        g1 = _through_unit(raw1, e1, g1)
        g2 = _through_unit(raw2, e2, g2)
    return loss, g1, g2


def _through_unit(raw, unit, g):
    norm = np.sqrt((raw * raw).sum(axis=1, keepdims=True))
    proj = (unit * g).sum(axis=1, keepdims=True)
    return np.where(norm > 0, (g - unit * proj) / np.where(norm > 0, norm, 1.0), 0.0)
