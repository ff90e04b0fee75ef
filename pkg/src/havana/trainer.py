"""Contrastive pre-training, supervised fine-tuning, voting inference, checkpoints."""

import json
import logging
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .cloud import atomic_write, extract_sphere, grid_subsample
from .clustering import DEFAULT_K, kmeans, standardize_features
from .contrastive import (
    MiningConfig,
    contrastive_loss,
    generate_block_pair,
    mine_negatives,
    mine_positives,
)
from .encoder import (
    EncoderConfig,
    backward,
    build_input_features,
    forward,
    init_head,
    init_params,
    segmentation_head,
)
from .errors import ArgumentError, ContractError, DataError, FormatError, UnsupportedVersionError
from .evaluation import mined_pair_purity
from .features import compute_features, DEFAULT_NEIGHBORS
from .spatial import build_index

log = logging.getLogger(__name__)

MAGIC = b"HVNA"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    decay_factor: float = 0.98
    decay_every: int = 5
    iterations_per_epoch: int = 200
    epochs: int = 1
    batch_blocks: int = 4
    seed: int = 0
    mining: MiningConfig = field(default_factory=MiningConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    label_fraction: float = 1.0
    crop_axis: int = 0
    grid_cell: float | None = 0.4
    radius: float = 10.0
    feature_neighbors: int = DEFAULT_NEIGHBORS
    feature_center: str = "medoid"
    n_clusters: int = DEFAULT_K
    kmeans_max_iter: int = 100
    rot_range: tuple = (0.0, 360.0)
    scale_range: tuple = (0.8, 1.2)
    n_classes: int | None = None
    freeze_encoder: bool = False
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.mining, dict):
            self.mining = MiningConfig(**self.mining)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.rot_range = tuple(self.rot_range)
        self.scale_range = tuple(self.scale_range)
        if not self.learning_rate > 0 or not self.decay_factor > 0 or self.decay_every < 1:
            raise ArgumentError("learning rate, decay factor and decay period must be positive")
        if self.iterations_per_epoch < 0 or self.epochs < 0 or self.batch_blocks < 1:
            raise ArgumentError("iteration, epoch and batch counts must be non-negative")
        if not 0 < self.label_fraction <= 1:
            raise ArgumentError("label_fraction must lie in (0, 1]")
        if self.grid_cell is not None and not self.grid_cell > 0:
            raise ArgumentError("grid_cell must be positive")
        if not self.radius > 0 or self.n_clusters < 1 or self.feature_neighbors < 1:
            raise ArgumentError("radius, cluster count and neighbour count must be positive")
        if self.threads < 1:
            raise ArgumentError("threads must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Checkpoint:
    encoder: dict
    head: dict | None = None
    config: dict = field(default_factory=dict)
    rng_summary: str = ""
    history: list = field(default_factory=list)
    version: int = FORMAT_VERSION

    def train_config(self):
        return TrainConfig.from_dict(self.config) if self.config else TrainConfig()


# ---------------------------------------------------------------------------
# optimisation


def learning_rate(epoch, cfg):
    """Step-decayed rate: ``base * decay ** floor(epoch / decay_every)``."""
    return cfg.learning_rate * cfg.decay_factor ** (epoch // cfg.decay_every)


def sgd_step(params, grads, epoch, cfg, decay=True):
    """Plain SGD update; returns a new parameter dict."""
    lr = learning_rate(epoch, cfg) if decay else cfg.learning_rate
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        out[name] = p - lr * g
    return out


def _accumulate(total, grads):
    if total is None:
        return {k: v.copy() for k, v in grads.items()}
    for k, v in grads.items():
        total[k] += v
    return total


def _scale(grads, factor):
    return {k: v * factor for k, v in grads.items()}


def _seeds(seed, n):
    return np.random.SeedSequence(seed).spawn(n)


# ---------------------------------------------------------------------------
# per-block preparation


@dataclass
class PreparedBlock:
    block: object
    inputs: np.ndarray
    neighbors: np.ndarray
    features: object = None


def prepare_block(block, cfg, with_features=True):
    """Input matrix, pooling neighbour lists and (optionally) geometric features."""
    enc = cfg.encoder
    k = max(enc.aggregation_k, cfg.feature_neighbors if with_features else 0)
    index = build_index(block.local_positions)
    nbrs = index.knn_batch(block.local_positions, k)
    feats = None
    if with_features:
        feats = compute_features(block.local_positions, index, cfg.feature_neighbors, cfg.feature_center)
    return PreparedBlock(block, build_input_features(block, enc), nbrs[:, : enc.aggregation_k], feats)


def _map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def pseudo_labels_for_pair(p1, p2, cfg, rng):
    """One k-means clustering over the union of both blocks' features."""
    feats = np.concatenate([p1.features.as_matrix(), p2.features.as_matrix()])
    k = min(cfg.n_clusters, len(feats))
    return kmeans(standardize_features(feats), k, cfg.kmeans_max_iter, seed=rng)


@dataclass
class PairStep:
    loss: float
    grads: dict
    pairs: object
    blocks: tuple
    pseudo: object
    embeddings: tuple


def contrastive_pair_step(cloud, index, params, cfg, rng, need_pseudo=None):
    """One block pair through features, clustering, encoder, mining and loss."""
    b1, b2, corr = generate_block_pair(cloud, index, cfg.radius, rng, cfg.rot_range, cfg.scale_range)
    if need_pseudo is None:
        need_pseudo = cfg.mining.strategy == "abspan"
    p1, p2 = _map(lambda b: prepare_block(b, cfg, need_pseudo), [b1, b2], cfg.threads)
    pseudo = pseudo_labels_for_pair(p1, p2, cfg, rng) if need_pseudo else None
    (v1, c1), (v2, c2) = _map(
        lambda p: forward(p.inputs, params, p.neighbors, cfg.encoder), [p1, p2], cfg.threads
    )
    positives = mine_positives(corr, cfg.mining.n_positive, rng)
    pairs = mine_negatives(v1, v2, positives, pseudo, cfg.mining, rng)
    loss, g1, g2 = contrastive_loss(v1, v2, pairs, cfg.mining)
    grads = _accumulate(backward(c1, params, g1, cfg.encoder), backward(c2, params, g2, cfg.encoder))
    return PairStep(loss, grads, pairs, (p1, p2), pseudo, (v1, v2))


def _preprocess(clouds, cfg):
    out = []
    for c in clouds:
        work = grid_subsample(c, cfg.grid_cell) if cfg.grid_cell else c
        if len(work) == 0:
            raise DataError("a training cloud is empty")
        out.append(work)
    return out


# ---------------------------------------------------------------------------
# pre-training


def pretrain(clouds, cfg, init=None, progress=None):
    """Contrastive pre-training; returns a checkpoint with the loss trace.

    ``progress`` is called as ``progress(iteration, loss)`` when given. The
    learning rate is held at its base value during pre-training.
    """
    if not clouds:
        raise ArgumentError("need at least one cloud")
    init_seq, loop_seq = _seeds(cfg.seed, 2)
    params = dict(init) if init is not None else init_params(cfg.encoder, init_seq)
    rng = np.random.default_rng(loop_seq)
    work = _preprocess(clouds, cfg)
    indexes = [build_index(c) for c in work]
    history = []
    it = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.iterations_per_epoch):
            total, loss = None, 0.0
            for _ in range(cfg.batch_blocks):
                ci = int(rng.integers(len(work)))
                step = contrastive_pair_step(work[ci], indexes[ci], params, cfg, rng)
                total = _accumulate(total, step.grads)
                loss += step.loss
            params = sgd_step(params, _scale(total, 1.0 / cfg.batch_blocks), epoch, cfg, decay=False)
            history.append(loss / cfg.batch_blocks)
            if progress is not None:
                progress(it, history[-1])
            it += 1
    return Checkpoint(
        encoder=params,
        config=cfg.to_dict(),
        rng_summary=f"SeedSequence({cfg.seed}) iterations={it}",
        history=history,
    )


# ---------------------------------------------------------------------------
# fine-tuning


def crop_mask(cloud, fraction, axis=0):
    """Labeled points of a contiguous slab holding ``fraction`` of them."""
    if cloud.labels is None:
        raise DataError("cloud has no labels")
    if fraction >= 1.0:
        return np.ones(len(cloud), dtype=bool)
    coord = cloud.positions[:, axis]
    return coord <= np.quantile(coord, fraction)


def _n_classes(clouds, cfg):
    if cfg.n_classes is not None:
        return cfg.n_classes
    return max(2, max(int(c.labels.max()) + 1 for c in clouds if len(c)))


def finetune(init, clouds, cfg, progress=None):
    """Supervised training of encoder and head on the labeled crop.

    ``init`` is a :class:`Checkpoint` (pre-trained weights) or ``None`` for a
    fresh initialisation from ``cfg.seed``.
    """
    if not clouds:
        raise ArgumentError("need at least one labeled cloud")
    if any(c.labels is None for c in clouds):
        raise DataError("fine-tuning needs labeled clouds")
    work = _preprocess(clouds, cfg)
    masks = [crop_mask(c, cfg.label_fraction, cfg.crop_axis) for c in work]
    usable = [i for i, m in enumerate(masks) if m.any()]
    if not usable:
        raise DataError("no labeled points after masking")
    n_classes = _n_classes(work, cfg)
    enc_seq, head_seq, loop_seq = _seeds(cfg.seed, 3)
    if init is not None:
        params = dict(init.encoder)
        head = dict(init.head) if init.head is not None else init_head(n_classes, head_seq)
    else:
        params = init_params(cfg.encoder, enc_seq)
        head = init_head(n_classes, head_seq)
    if head["head.W"].shape[1] != n_classes:
        raise ContractError("checkpoint head does not match the number of classes")
    rng = np.random.default_rng(loop_seq)
    indexes = [build_index(c) for c in work]
    labeled = [np.flatnonzero(m) for m in masks]
    history = []
    it = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.iterations_per_epoch):
            total, loss = None, 0.0
            for _ in range(cfg.batch_blocks):
                ci = usable[int(rng.integers(len(usable)))]
                center = work[ci].positions[labeled[ci][int(rng.integers(len(labeled[ci])))]]
                block = extract_sphere(work[ci], indexes[ci], center, cfg.radius)
                prep = prepare_block(block, cfg, with_features=False)
                emb, cache = forward(prep.inputs, params, prep.neighbors, cfg.encoder)
                lab = work[ci].labels[block.indices]
                l, _, g = segmentation_head(emb, head, lab, masks[ci][block.indices])
                grads = {"head.W": g["head.W"], "head.b": g["head.b"]}
                if not cfg.freeze_encoder:
                    grads.update(backward(cache, params, g["embeddings"], cfg.encoder))
                total = _accumulate(total, grads)
                loss += l
            total = _scale(total, 1.0 / cfg.batch_blocks)
            head = sgd_step(head, total, epoch, cfg)
            params = sgd_step(params, total, epoch, cfg)
            history.append(loss / cfg.batch_blocks)
            if progress is not None:
                progress(it, history[-1])
            it += 1
    config = cfg.to_dict()
    config["n_classes"] = n_classes
    return Checkpoint(
        encoder=params,
        head=head,
        config=config,
        rng_summary=f"SeedSequence({cfg.seed}) iterations={it}",
        history=history,
    )


# ---------------------------------------------------------------------------
# inference


@dataclass
class Prediction:
    probabilities: np.ndarray
    labels: np.ndarray
    coverage: np.ndarray


_SWEEP_OFFSETS = ((0.0, 0.0), (0.5, 0.5), (0.5, 0.0), (0.0, 0.5), (0.25, 0.25), (0.75, 0.75), (0.25, 0.75), (0.75, 0.25))
# stop sweeping once at most this fraction of points lacks votes; the rest is patched
_SWEEP_RESIDUE = 0.01
_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def _column_levels(z, radius):
    """Centre heights for one grid column: one per occupied slab of ``radius``."""
    if len(z) == 0:
        return []
    slab = np.floor((z - z.min()) / radius).astype(np.int64)
    return [float(np.median(z[slab == s])) for s in np.unique(slab)]


def predict_with_voting(ckpt, cloud, votes=20, cfg=None):
    """Average class probabilities over regularly placed overlapping spheres.

    Sphere centres lie on a horizontal grid of spacing ``radius / 2``. Tall
    grid columns are cut into slabs one radius thick and every occupied slab
    gets a centre at the median height of its points. The grid is swept
    through shifted offsets; points still short of ``votes`` afterwards get
    extra spheres centred half a radius away from them at rotating bearings.
    """
    if ckpt.head is None:
        raise ArgumentError("checkpoint has no segmentation head")
    if votes < 1:
        raise ArgumentError("votes must be >= 1")
    cfg = cfg or ckpt.train_config()
    if len(cloud) == 0:
        raise DataError("cloud is empty")
    work = grid_subsample(cloud, cfg.grid_cell) if cfg.grid_cell else cloud
    index = build_index(work)
    flat = work.positions.copy()
    flat[:, 2] = 0.0
    column_index = build_index(flat)
    n, n_classes = len(work), ckpt.head["head.W"].shape[1]
    prob_sum = np.zeros((n, n_classes))
    coverage = np.zeros(n, dtype=np.int64)
    spacing = cfg.radius / 2.0

    def run(center):
        try:
            block = extract_sphere(work, index, center, cfg.radius)
        except DataError:
            return False
        prep = prepare_block(block, cfg, with_features=False)
        emb, _ = forward(prep.inputs, ckpt.encoder, prep.neighbors, cfg.encoder, keep_cache=False)
        _, probs, _ = segmentation_head(emb, ckpt.head, None)
        prob_sum[block.indices] += probs
        coverage[block.indices] += 1
        return True

    lo = work.positions[:, :2].min(axis=0)
    hi = work.positions[:, :2].max(axis=0)
    for ox, oy in _SWEEP_OFFSETS:
        if np.mean(coverage < votes) <= _SWEEP_RESIDUE:
            break
        for x in np.arange(lo[0] - spacing + ox * spacing, hi[0] + spacing, spacing):
            for y in np.arange(lo[1] - spacing + oy * spacing, hi[1] + spacing, spacing):
                col = column_index.radius(np.array([x, y, 0.0]), spacing)
                for z in _column_levels(work.positions[col, 2], cfg.radius):
                    run(np.array([x, y, z]))
    turn = 0
    while coverage.min() < votes:
        p = int(coverage.argmin())
        ang = turn * _GOLDEN_ANGLE
        turn += 1
        center = work.positions[p] + spacing * np.array([np.cos(ang), np.sin(ang), 0.0])
        if not run(center):
            raise ContractError(f"point {p} cannot be covered")

    probs = prob_sum / coverage[:, None]
    if work is not cloud:
        nearest = index.knn_batch(cloud.positions, 1)[:, 0]
        probs, coverage = probs[nearest], coverage[nearest]
    return Prediction(probs, probs.argmax(axis=1), coverage)


# ---------------------------------------------------------------------------
# mining diagnostics


def mining_stats(cloud, seed, cfg, params=None, strategies=("abspan", "hardest")):
    """Mine one block pair with each strategy from identical inputs.

    Returns one dict per strategy with the valid-negative count, the fraction
    of valid negatives sharing a true class, and the mean negative distance.
    """
    if cloud.labels is None:
        raise DataError("mining statistics need a labeled cloud")
    init_seq, loop_seq = _seeds(seed, 2)
    rng = np.random.default_rng(loop_seq)
    params = params if params is not None else init_params(cfg.encoder, init_seq)
    index = build_index(cloud)
    b1, b2, corr = generate_block_pair(cloud, index, cfg.radius, rng, cfg.rot_range, cfg.scale_range)
    p1, p2 = (prepare_block(b, cfg) for b in (b1, b2))
    pseudo = pseudo_labels_for_pair(p1, p2, cfg, rng)
    v1, _ = forward(p1.inputs, params, p1.neighbors, cfg.encoder, keep_cache=False)
    v2, _ = forward(p2.inputs, params, p2.neighbors, cfg.encoder, keep_cache=False)
    positives = mine_positives(corr, cfg.mining.n_positive, rng)
    state = rng.bit_generator.state
    truth1 = cloud.labels[b1.indices]
    truth2 = cloud.labels[b2.indices]
    rows = []
    for strategy in strategies:
        mcfg = MiningConfig(**{**asdict(cfg.mining), "strategy": strategy})
        mrng = np.random.default_rng()
        mrng.bit_generator.state = state
        pairs = mine_negatives(v1, v2, positives, pseudo, mcfg, mrng)
        a, b = pairs.valid_negatives()
        dist = np.sqrt(((v1[a] - v2[b]) ** 2).sum(axis=1)) if len(a) else np.zeros(0)
        rows.append(
            {
                "strategy": strategy,
                "seed": seed,
                "n_valid": len(a),
                "frac_same_true_label": mined_pair_purity(pairs, truth1, truth2),
                "mean_neg_distance": float(dist.mean()) if len(dist) else None,
                "pairs": pairs,
                "pseudo": pseudo,
                "truth": (truth1, truth2),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# checkpoint IO


def checkpoint_bytes(ckpt):
    meta = {
        "config": ckpt.config,
        "rng": ckpt.rng_summary,
        "history": ckpt.history,
        "has_head": ckpt.head is not None,
    }
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack("<I", len(text)) + text
    tensors = list(ckpt.encoder.items()) + list((ckpt.head or {}).items())
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def parse_checkpoint(data):
    if len(data) < 8:
        raise FormatError("checkpoint truncated: missing header")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (field 'version')")
    if len(data) < 16:
        raise FormatError("checkpoint truncated")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    body = data[:-4]
    if zlib.crc32(body) != crc:
        raise FormatError("checksum mismatch (truncated or corrupted checkpoint)")
    try:
        pos = 8
        (tlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos : pos + tlen].decode("utf-8"))
        pos += tlen
        tensors = {}
        while pos < len(body):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(body):
                raise FormatError(f"tensor {name!r} runs past the end of the file")
            arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            tensors[name] = arr.astype(np.float64)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from None
    head = {k: v for k, v in tensors.items() if k.startswith("head.")}
    encoder = {k: v for k, v in tensors.items() if not k.startswith("head.")}
    if meta.get("has_head") and not head:
        raise FormatError("field 'has_head' is set but no head tensors are present")
    return Checkpoint(
        encoder=encoder,
        head=head or None,
        config=meta.get("config", {}),
        rng_summary=meta.get("rng", ""),
        history=meta.get("history", []),
        version=version,
    )


def save_checkpoint(ckpt, path):
    atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
