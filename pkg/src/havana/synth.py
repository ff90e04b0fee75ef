"""Deterministic labeled synthetic scenes that look roughly like ALS data."""

import math
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .errors import ArgumentError

CLASS_NAMES = ("ground", "roof", "facade", "pole", "vegetation", "car")
GROUND, ROOF, FACADE, POLE, VEGETATION, CAR = range(len(CLASS_NAMES))

# mean return intensity per class; noise is added per point
_INTENSITY = {GROUND: 0.35, ROOF: 0.55, FACADE: 0.45, POLE: 0.6, VEGETATION: 0.3, CAR: 0.65}
_INTENSITY_NOISE = 0.12
_PLACEMENT_TRIES = 300


@dataclass
class SceneSpec:
    extent: tuple = (50.0, 50.0)
    density: float = 10.0
    n_buildings: int = 4
    n_poles: int = 6
    n_trees: int = 8
    n_cars: int = 6
    noise_sigma: float = 0.03
    seed: int = 0
    building_size: tuple = (8.0, 16.0)
    building_height: tuple = (5.0, 12.0)
    tree_radius: tuple = (2.0, 3.5)
    pole_height: tuple = (6.0, 9.0)
    pole_radius: float = 0.15
    car_size: tuple = (4.5, 1.8, 1.5)

    def __post_init__(self):
        if min(self.extent) <= 0 or self.density <= 0:
            raise ArgumentError("extent and density must be positive")
        if self.noise_sigma < 0:
            raise ArgumentError("noise sigma must be >= 0")
        if min(self.n_buildings, self.n_poles, self.n_trees, self.n_cars) < 0:
            raise ArgumentError("object counts must be >= 0")


@dataclass
class Manifest:
    objects: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_text(self):
        lines = []
        for obj in self.objects:
            kv = " ".join(f"{k}={_fmt(v)}" for k, v in obj.items() if k != "kind")
            lines.append(f"{obj['kind']} {kv}")
        lines.extend(f"warning {w}" for w in self.warnings)
        return "\n".join(lines) + "\n"


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


class _Footprints:
    """Axis-aligned rectangles already occupied, for rejection placement."""

    def __init__(self, extent):
        self.extent = extent
        self.rects = []

    def place(self, rng, w, d, margin=1.0):
        W, H = self.extent
        if w + 2 * margin > W or d + 2 * margin > H:
            return None
        for _ in range(_PLACEMENT_TRIES):
            x0 = rng.uniform(margin, W - w - margin)
            y0 = rng.uniform(margin, H - d - margin)
            r = (x0, y0, x0 + w, y0 + d)
            if all(not _overlap(r, o, margin) for o in self.rects):
                self.rects.append(r)
                return r
        return None


def _overlap(a, b, margin):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _count(density, area):
    return int(round(density * area))


def _jitter(rng, n, sigma):
    return rng.uniform(-sigma, sigma, n) if sigma > 0 else np.zeros(n)


def _rect_surface(rng, n, x0, y0, x1, y1, z, sigma):
    return np.stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), z + _jitter(rng, n, sigma)], axis=1)


def _walls(rng, density, x0, y0, x1, y1, z0, z1, sigma):
    """Points on the four vertical sides of a box."""
    out = []
    h = z1 - z0
    for axis, fixed, lo, hi in ((1, y0, x0, x1), (1, y1, x0, x1), (0, x0, y0, y1), (0, x1, y0, y1)):
        n = _count(density, (hi - lo) * h)
        along = rng.uniform(lo, hi, n)
        across = fixed + _jitter(rng, n, sigma)
        z = rng.uniform(z0, z1, n)
        pts = np.stack([along, across, z], axis=1) if axis == 1 else np.stack([across, along, z], axis=1)
        out.append(pts)
    return np.concatenate(out) if out else np.zeros((0, 3))


def synthesize(spec):
    """Build a scene; returns ``(cloud, manifest)``."""
    rng = np.random.default_rng(spec.seed)
    W, H = spec.extent
    sigma = spec.noise_sigma
    feet = _Footprints(spec.extent)
    manifest = Manifest()
    parts = []  # (points, label)

    def emit(kind, pts, label, **info):
        if len(pts) == 0:
            manifest.warnings.append(f"{kind} skipped: density too low for any point")
            return
        parts.append((pts, label))
        manifest.objects.append({"kind": kind, "points": len(pts), **info})

    for _ in range(spec.n_buildings):
        w, d = rng.uniform(*spec.building_size, 2)
        h = rng.uniform(*spec.building_height)
        r = feet.place(rng, w, d, margin=2.0)
        if r is None:
            manifest.warnings.append("building skipped: no free space")
            continue
        x0, y0, x1, y1 = r
        roof = _rect_surface(rng, _count(spec.density, w * d), x0, y0, x1, y1, h, sigma)
        emit("roof", roof, ROOF, x0=x0, y0=y0, x1=x1, y1=y1, height=h)
        emit("facade", _walls(rng, spec.density, x0, y0, x1, y1, 0.0, h, sigma), FACADE,
             x0=x0, y0=y0, x1=x1, y1=y1, height=h)

    cl, cw, ch = spec.car_size
    for _ in range(spec.n_cars):
        if rng.random() < 0.5:
            w, d = cl, cw
        else:
            w, d = cw, cl
        r = feet.place(rng, w, d, margin=1.0)
        if r is None:
            manifest.warnings.append("car skipped: no free space")
            continue
        x0, y0, x1, y1 = r
        top = _rect_surface(rng, _count(spec.density, w * d), x0, y0, x1, y1, ch, sigma)
        sides = _walls(rng, spec.density, x0, y0, x1, y1, 0.0, ch, sigma)
        emit("car", np.concatenate([top, sides]), CAR, x0=x0, y0=y0, x1=x1, y1=y1, height=ch)

    for _ in range(spec.n_trees):
        rad = rng.uniform(*spec.tree_radius)
        r = feet.place(rng, 2 * rad, 2 * rad, margin=0.5)
        if r is None:
            manifest.warnings.append("tree skipped: no free space")
            continue
        cx, cy = (r[0] + r[2]) / 2, (r[1] + r[3]) / 2
        cz = rng.uniform(rad + 2.0, rad + 5.0)
        n = _count(spec.density, math.pi * rad * rad)
        pts = rng.normal(size=(n, 3)) * np.array([rad / 2, rad / 2, rad / 2.5]) + np.array([cx, cy, cz])
        emit("tree", pts, VEGETATION, cx=cx, cy=cy, cz=cz, radius=rad)

    for _ in range(spec.n_poles):
        ph = rng.uniform(*spec.pole_height)
        pr = spec.pole_radius
        r = feet.place(rng, 2 * pr, 2 * pr, margin=1.0)
        if r is None:
            manifest.warnings.append("pole skipped: no free space")
            continue
        cx, cy = (r[0] + r[2]) / 2, (r[1] + r[3]) / 2
        n = _count(spec.density, ph * 2 * math.pi * pr)
        ang = rng.uniform(0, 2 * math.pi, n)
        rr = pr + _jitter(rng, n, sigma)
        pts = np.stack([cx + rr * np.cos(ang), cy + rr * np.sin(ang), rng.uniform(0, ph, n)], axis=1)
        emit("pole", pts, POLE, cx=cx, cy=cy, height=ph, radius=pr)

    n_ground = _count(spec.density, W * H)
    ground = _rect_surface(rng, n_ground, 0.0, 0.0, W, H, 0.0, sigma)
    blocked = np.zeros(len(ground), dtype=bool)
    for obj in manifest.objects:
        if obj["kind"] in ("roof", "car"):
            blocked |= (
                (ground[:, 0] >= obj["x0"]) & (ground[:, 0] <= obj["x1"])
                & (ground[:, 1] >= obj["y0"]) & (ground[:, 1] <= obj["y1"])
            )
    emit("ground", ground[~blocked], GROUND, width=W, depth=H)

    positions = np.concatenate([p for p, _ in parts]) if parts else np.zeros((0, 3))
    labels = np.concatenate([np.full(len(p), lab, dtype=np.int64) for p, lab in parts]) if parts else np.zeros(0, np.int64)
    means = np.array([_INTENSITY[c] for c in range(len(CLASS_NAMES))])
    intensity = np.clip(means[labels] + rng.normal(0.0, _INTENSITY_NOISE, len(labels)), 0.0, 1.0)
    returns = np.ones(len(labels), dtype=np.int64)
    veg = labels == VEGETATION
    returns[veg] = rng.integers(1, 4, int(veg.sum()))
    return PointCloud(positions, intensity, returns, labels), manifest


def generate_scene(spec):
    return synthesize(spec)[0]


def split_scene(cloud, fraction, axis=0):
    """Split at the ``fraction`` quantile of one coordinate: ``(train, test)``.

    Train holds points at or below the quantile, test the rest.
    """
    if not 0 < fraction < 1:
        raise ArgumentError("fraction must lie in (0, 1)")
    coord = cloud.positions[:, axis]
    if len(coord) == 0 or coord.max() == coord.min():
        raise ArgumentError("cloud has no extent along the split axis")
    q = np.quantile(coord, fraction)
    left = coord <= q
    return cloud.subset(np.flatnonzero(left)), cloud.subset(np.flatnonzero(~left))
