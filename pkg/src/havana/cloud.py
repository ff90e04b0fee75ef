"""Point clouds, havana-xyz text IO, grid subsampling and spherical blocks."""

import math
import os
import re
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError, EmptyBlockError, FormatError, ParseError

STANDARD_COLUMNS = ("x", "y", "z", "intensity", "return", "label")
_HEADER_RE = re.compile(r"^#\s*havana-xyz\s+v(\d+)\s+columns=(.*)$")


@dataclass
class PointCloud:
    """Positions plus optional per-point attributes.

    ``extra`` holds additional named scalar columns (e.g. the ``correct`` flag
    of an error map); they round-trip through the text format.
    """

    positions: np.ndarray
    intensity: np.ndarray | None = None
    return_count: np.ndarray | None = None
    labels: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if not np.all(np.isfinite(self.positions)):
            raise ArgumentError("point coordinates must be finite")
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.return_count is not None:
            self.return_count = np.asarray(self.return_count, dtype=np.int64)
            if np.any(self.return_count < 0):
                raise ArgumentError("return counts must be non-negative")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if np.any(self.labels < 0):
                raise ArgumentError("labels must be non-negative class ids")
        self.extra = {k: np.asarray(v, dtype=np.float64) for k, v in self.extra.items()}
        for name, col in self._attribute_items():
            if col.shape != (n,):
                raise ArgumentError(f"attribute {name!r} has shape {col.shape}, expected ({n},)")

    def _attribute_items(self):
        for name in ("intensity", "return_count", "labels"):
            col = getattr(self, name)
            if col is not None:
                yield name, col
        yield from self.extra.items()

    def __len__(self):
        return len(self.positions)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return PointCloud(
            self.positions[idx],
            pick(self.intensity),
            pick(self.return_count),
            pick(self.labels),
            {k: v[idx] for k, v in self.extra.items()},
        )

    @property
    def columns(self):
        cols = ["x", "y", "z"]
        if self.intensity is not None:
            cols.append("intensity")
        if self.return_count is not None:
            cols.append("return")
        if self.labels is not None:
            cols.append("label")
        cols.extend(self.extra)
        return cols


# ---------------------------------------------------------------------------
# text IO


def _parse_header(line, lineno):
    m = _HEADER_RE.match(line.strip())
    if not m:
        return None
    version = int(m.group(1))
    if version != 1:
        raise FormatError(f"line {lineno}: unsupported havana-xyz version {version}")
    cols = m.group(2).split()
    if cols[:3] != ["x", "y", "z"] or len(set(cols)) != len(cols):
        raise FormatError(f"line {lineno}: columns must start with 'x y z' and be unique")
    return cols


def read_cloud(lines):
    """Parse havana-xyz text given as an iterable of lines."""
    columns = ["x", "y", "z"]
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        if lineno == 1:
            cols = _parse_header(raw, lineno)
            if cols is not None:
                columns = cols
                continue
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if len(parts) != len(columns):
            raise FormatError(
                f"line {lineno}: expected {len(columns)} columns ({' '.join(columns)}), got {len(parts)}"
            )
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"cannot parse {text!r} as numbers", line=lineno) from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite value", line=lineno)
        rows.append(values)

    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(columns))
    col = {name: data[:, i] for i, name in enumerate(columns)}

    def as_int(name):
        v = col[name]
        if np.any(v != np.round(v)) or np.any(v < 0):
            raise FormatError(f"column {name!r} must hold non-negative integers")
        return v.astype(np.int64)

    return PointCloud(
        positions=data[:, :3],
        intensity=col.get("intensity"),
        return_count=as_int("return") if "return" in col else None,
        labels=as_int("label") if "label" in col else None,
        extra={k: v for k, v in col.items() if k not in STANDARD_COLUMNS},
    )


def load_cloud(path):
    """Read a havana-xyz file."""
    with open(path, encoding="utf-8") as fh:
        return read_cloud(fh)


def _fmt(v):
    return f"{v:.9g}"


def format_cloud(cloud):
    cols = cloud.columns
    out = [f"# havana-xyz v1 columns={' '.join(cols)}\n"]
    fields = [cloud.positions[:, 0], cloud.positions[:, 1], cloud.positions[:, 2]]
    kinds = [_fmt, _fmt, _fmt]
    if cloud.intensity is not None:
        fields.append(cloud.intensity)
        kinds.append(_fmt)
    if cloud.return_count is not None:
        fields.append(cloud.return_count)
        kinds.append(str)
    if cloud.labels is not None:
        fields.append(cloud.labels)
        kinds.append(str)
    for v in cloud.extra.values():
        fields.append(v)
        kinds.append(_fmt)
    for row in zip(*fields):
        out.append(" ".join(k(v) for k, v in zip(kinds, row)) + "\n")
    return "".join(out)


def atomic_write(path, data):
    """Write ``data`` (str or bytes) through a temporary file, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    if isinstance(data, str):
        data = data.encode("utf-8")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_cloud(cloud, path):
    atomic_write(path, format_cloud(cloud))


# ---------------------------------------------------------------------------
# grid subsampling


def _majority(labels_sorted_by_cell, inverse, n_cells):
    n_classes = int(labels_sorted_by_cell.max()) + 1
    votes = np.zeros((n_cells, n_classes), dtype=np.int64)
    np.add.at(votes, (inverse, labels_sorted_by_cell), 1)
    return votes.argmax(axis=1)  # first maximum = smallest class id


def grid_subsample(cloud, cell):
    """One barycentric representative per occupied cubic cell.

    Cells are anchored at the coordinate origin so the result is stable under
    re-application; output points are ordered by cell key.
    """
    if not cell > 0:
        raise ArgumentError("cell size must be positive")
    if len(cloud) == 0:
        return cloud.subset(np.zeros(0, dtype=np.int64))
    keys = np.floor(cloud.positions / cell).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_cells = len(counts)

    def mean(values):
        return np.bincount(inverse, weights=values, minlength=n_cells) / counts

    positions = np.stack([mean(cloud.positions[:, i]) for i in range(3)], axis=1)
    intensity = None if cloud.intensity is None else mean(cloud.intensity)
    returns = None
    if cloud.return_count is not None:
        returns = np.floor(mean(cloud.return_count.astype(np.float64)) + 0.5).astype(np.int64)
    labels = None
    if cloud.labels is not None:
        labels = _majority(cloud.labels, inverse, n_cells)
    extra = {k: mean(v) for k, v in cloud.extra.items()}
    return PointCloud(positions, intensity, returns, labels, extra)


# ---------------------------------------------------------------------------
# blocks and similarity transforms


@dataclass(frozen=True)
class SimilarityTransform:
    rotation_deg: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ArgumentError("scale must be positive")

    def inverse(self):
        return SimilarityTransform((-self.rotation_deg) % 360.0, 1.0 / self.scale)

    def matrix(self):
        """3x3 linear part (rotation about z followed by uniform scaling)."""
        t = math.radians(self.rotation_deg)
        c, s = math.cos(t), math.sin(t)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return self.scale * rot


@dataclass
class Block:
    parent: PointCloud
    indices: np.ndarray
    center: np.ndarray
    radius: float
    local_positions: np.ndarray
    transform: SimilarityTransform = SimilarityTransform()

    def __len__(self):
        return len(self.indices)


def extract_sphere(cloud, index, center, radius):
    """All points within ``radius`` of ``center``, re-centred at their centroid.

    Raises :class:`EmptyBlockError` when the sphere holds no points.
    """
    if not radius > 0:
        raise ArgumentError("radius must be positive")
    center = np.asarray(center, dtype=np.float64)
    idx = index.radius(center, radius)
    if len(idx) == 0:
        raise EmptyBlockError(f"no points within {radius} of {center.tolist()}")
    pts = cloud.positions[idx]
    local = pts - pts.mean(axis=0)
    return Block(cloud, idx, center, float(radius), local)


def apply_transform(block, t):
    """Rotate about the vertical axis through the block centroid, then scale."""
    if len(block) == 0:
        raise ArgumentError("cannot transform an empty block")
    centroid = block.local_positions.mean(axis=0)
    moved = (block.local_positions - centroid) @ t.matrix().T + centroid
    composed = SimilarityTransform(
        (block.transform.rotation_deg + t.rotation_deg) % 360.0,
        block.transform.scale * t.scale,
    )
    return replace(block, local_positions=moved, radius=block.radius * t.scale, transform=composed)


def sample_transform(rng, rot_range=(0.0, 360.0), scale_range=(0.8, 1.2)):
    """Uniform rotation angle and scale from the given closed ranges."""
    (r0, r1), (s0, s1) = rot_range, scale_range
    if r1 < r0 or s1 < s0:
        raise ArgumentError("range bounds are inverted")
    if s0 <= 0:
        raise ArgumentError("scale range must be positive")
    rot = rng.uniform(r0, r1) if r1 > r0 else float(r0)
    scale = rng.uniform(s0, s1) if s1 > s0 else float(s0)
    return SimilarityTransform(float(rot) % 360.0, float(scale))
