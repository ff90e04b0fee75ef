"""Compact per-point embedding network with hand-derived backpropagation.

Each stage applies, per point::

    a = leaky(X @ W_pre + b_pre)
    p = max over the point's neighbours of a       (elementwise)
    X' = [a, p] @ W_post + b_post

and a final affine map projects to 64 channels. The segmentation head is a
further affine map to class logits followed by softmax cross-entropy.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError, ContractError

OUTPUT_DIM = 64


@dataclass
class EncoderConfig:
    block_widths: tuple = (32, 64, 64)
    aggregation_k: int = 16
    output_dim: int = OUTPUT_DIM
    negative_slope: float = 0.1
    use_intensity: bool = True
    use_returns: bool = True

    def __post_init__(self):
        self.block_widths = tuple(int(w) for w in self.block_widths)
        if self.output_dim != OUTPUT_DIM:
            raise ConfigError(f"output_dim is fixed at {OUTPUT_DIM}")
        if not self.block_widths or min(self.block_widths) < 1:
            raise ConfigError("block widths must be positive")
        if self.aggregation_k < 1:
            raise ConfigError("aggregation_k must be >= 1")

    def input_channels(self):
        return 2 + int(self.use_intensity) + int(self.use_returns)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    neighbors: np.ndarray
    pre: list = field(default_factory=list)  # pre-activation per stage
    act: list = field(default_factory=list)
    argmax: list = field(default_factory=list)  # chosen neighbour per stage
    stage_out: list = field(default_factory=list)
    snapshot: dict = field(default_factory=dict)  # parameter values seen by forward


def as_float(a):
    """Float array that keeps extended precision when given, float64 otherwise."""
    a = np.asarray(a)
    if a.dtype == np.longdouble:
        return a
    return a.astype(np.float64, copy=False)


def _stale(cache, params):
    if cache.snapshot.keys() != params.keys():
        return True
    return any(not np.array_equal(cache.snapshot[k], params[k]) for k in params)


# ---------------------------------------------------------------------------
# inputs and parameters


def build_input_features(block, config=None):
    """Per-point input matrix: 1, [intensity], [return count], normalised height.

    The height is ``(z - z_min) / (2 * radius)`` inside the block; attributes
    missing from the parent cloud are replaced by zeros so the channel count
    stays fixed by the config.
    """
    config = config or EncoderConfig()
    n = len(block)
    if n == 0:
        raise ArgumentError("block is empty")
    cols = [np.ones(n)]
    parent = block.parent
    if config.use_intensity:
        cols.append(np.zeros(n) if parent.intensity is None else parent.intensity[block.indices])
    if config.use_returns:
        rc = parent.return_count
        cols.append(np.zeros(n) if rc is None else rc[block.indices].astype(np.float64))
    z = block.local_positions[:, 2]
    cols.append((z - z.min()) / (2.0 * block.radius))
    return np.stack(cols, axis=1)


def _uniform_glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def layer_shapes(config):
    shapes = []
    c = config.input_channels()
    for s, w in enumerate(config.block_widths):
        shapes.append((f"stage{s}.pre", c, w))
        shapes.append((f"stage{s}.post", 2 * w, w))
        c = w
    shapes.append(("out", c, config.output_dim))
    return shapes


def init_params(config, seed=0):
    """Glorot-uniform weights, zero biases; an ordered name -> array dict."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, fan_in, fan_out in layer_shapes(config):
        params[f"{name}.W"] = _uniform_glorot(rng, fan_in, fan_out)
        params[f"{name}.b"] = np.zeros(fan_out)
    return params


def init_head(n_classes, seed=0, in_dim=OUTPUT_DIM):
    if n_classes < 2:
        raise ArgumentError("a segmentation head needs at least 2 classes")
    rng = np.random.default_rng(seed)
    return {"head.W": _uniform_glorot(rng, in_dim, n_classes), "head.b": np.zeros(n_classes)}


def check_params(params, config):
    for name, fan_in, fan_out in layer_shapes(config):
        W, b = params.get(f"{name}.W"), params.get(f"{name}.b")
        if W is None or b is None:
            raise ConfigError(f"missing parameters for layer {name!r}")
        if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ConfigError(f"layer {name!r} has shape {W.shape}/{b.shape}, expected ({fan_in}, {fan_out})")


def neighbor_lists(positions, k):
    """``k`` nearest in-block neighbours of every point (self included)."""
    from .spatial import SpatialIndex

    return SpatialIndex(positions).knn_batch(positions, k)


# ---------------------------------------------------------------------------
# forward / backward


def _max_pool(a, nbrs):
    """Channel-wise max over neighbours and the winning point per channel.

    ``nbrs`` rows must be sorted by point index; argmax returns the first
    maximum, so ties go to the lowest-index neighbour.
    """
    gathered = a[nbrs]  # (n, k, w)
    pick = gathered.argmax(axis=1)
    best = np.take_along_axis(gathered, pick[:, None, :], axis=1)[:, 0, :]
    return best, np.take_along_axis(nbrs, pick, axis=1)


def forward(inputs, params, neighbors, config=None, keep_cache=True):
    """Embed every point; returns ``(embeddings (n, 64), cache)``.

    With ``keep_cache=False`` no backward pass is possible and the cache is
    ``None``; pooling then skips the winner bookkeeping, which is much cheaper.
    """
    config = config or EncoderConfig()
    check_params(params, config)
    x = as_float(inputs)
    nbrs = np.asarray(neighbors, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != config.input_channels():
        raise ConfigError(f"expected inputs with {config.input_channels()} channels, got shape {x.shape}")
    if nbrs.ndim != 2 or len(nbrs) != len(x):
        raise ConfigError("neighbour lists must have one row per point")
    cache = None
    if keep_cache:
        # pooling ties resolve to the lowest point index: sort each row by index
        nbrs = np.sort(nbrs, axis=1)
        cache = ForwardCache(inputs=x, neighbors=nbrs, snapshot={k: v.copy() for k, v in params.items()})
    slope = config.negative_slope
    h = x
    for s in range(len(config.block_widths)):
        z = h @ params[f"stage{s}.pre.W"] + params[f"stage{s}.pre.b"]
        a = np.where(z > 0, z, slope * z)
        if cache is None:
            cat = np.concatenate([a, a[nbrs].max(axis=1)], axis=1)
        else:
            pooled, src = _max_pool(a, nbrs)
            cat = np.concatenate([a, pooled], axis=1)
            cache.stage_out.append(h)
            cache.pre.append(z)
            cache.act.append(cat)
            cache.argmax.append(src)
        h = cat @ params[f"stage{s}.post.W"] + params[f"stage{s}.post.b"]
    if cache is not None:
        cache.stage_out.append(h)
    out = h @ params["out.W"] + params["out.b"]
    return out, cache


def backward(cache, params, d_out, config=None):
    """Parameter gradients for an upstream gradient ``d_out`` on the embeddings."""
    config = config or EncoderConfig()
    if _stale(cache, params):
        raise ContractError("forward cache was produced with different parameters")
    d_out = np.asarray(d_out, dtype=np.float64)
    n = len(cache.inputs)
    if d_out.shape != (n, config.output_dim):
        raise ContractError(f"upstream gradient has shape {d_out.shape}, expected ({n}, {config.output_dim})")
    grads = {}
    h_last = cache.stage_out[-1]
    grads["out.W"] = h_last.T @ d_out
    grads["out.b"] = d_out.sum(axis=0)
    dh = d_out @ params["out.W"].T
    slope = config.negative_slope
    for s in reversed(range(len(config.block_widths))):
        cat = cache.act[s]
        grads[f"stage{s}.post.W"] = cat.T @ dh
        grads[f"stage{s}.post.b"] = dh.sum(axis=0)
        dcat = dh @ params[f"stage{s}.post.W"].T
        w = cat.shape[1] // 2
        da = dcat[:, :w].copy()
        # route pooled gradient to the winning neighbour of each channel
        src = cache.argmax[s]
        flat = (src * w + np.arange(w)[None, :]).ravel()
        da += np.bincount(flat, weights=dcat[:, w:].ravel(), minlength=n * w).reshape(n, w)
        z = cache.pre[s]
        dz = np.where(z > 0, da, slope * da)
        h_in = cache.stage_out[s]
        grads[f"stage{s}.pre.W"] = h_in.T @ dz
        grads[f"stage{s}.pre.b"] = dz.sum(axis=0)
        dh = dz @ params[f"stage{s}.pre.W"].T
    return {name: grads[name] for name in params if name in grads}


def segmentation_head(embeddings, head_params, labels, label_mask=None):
    """Softmax cross-entropy over masked points.

    Returns ``(loss, probabilities, grads)`` where ``grads`` holds ``head.W``,
    ``head.b`` and ``embeddings`` (gradient w.r.t. the input embeddings).
    """
    emb = as_float(embeddings)
    W, b = head_params["head.W"], head_params["head.b"]
    n_classes = W.shape[1]
    if n_classes < 2:
        raise ArgumentError("need at least 2 classes")
    logits = emb @ W + b
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    if labels is None:
        return None, probs, None
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.ones(len(emb), dtype=bool) if label_mask is None else np.asarray(label_mask, bool)
    m = int(mask.sum())
    if m == 0:
        raise ArgumentError("label mask selects no points")
    idx = np.flatnonzero(mask)
    lab = labels[idx]
    if np.any(lab >= n_classes) or np.any(lab < 0):
        raise ArgumentError("labels out of range for the head")
    logp = logits[idx, lab] - np.log(e[idx].sum(axis=1))
    loss = -logp.sum() / m
    dlogits = np.zeros_like(probs)
    dlogits[idx] = probs[idx]
    dlogits[idx, lab] -= 1.0
    dlogits /= m
    grads = {"head.W": emb.T @ dlogits, "head.b": dlogits.sum(axis=0), "embeddings": dlogits @ W.T}
    return loss, probs, grads
