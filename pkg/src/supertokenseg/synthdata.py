"""Deterministic synthetic LiDAR-like scene generator.

Scenes contain six semantic classes (Road, Building, Grass, Tree, Soil,
Powerline) with labels exact by construction. Per-point features are
height-above-ground and a class-correlated pseudo-reflectance. The same
SceneSpec always yields a bit-identical cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud

CLASS_NAMES = ("Road", "Building", "Grass", "Tree", "Soil", "Powerline")
ROAD, BUILDING, GRASS, TREE, SOIL, POWERLINE = range(6)

# pseudo-reflectance class means, the non-geometric signal the embedder can use
REFLECTANCE = np.array([0.10, 0.30, 0.50, 0.70, 0.90, 0.99])

POWERLINE_HEIGHT = 6.0


@dataclass
class SceneSpec:
    rng_seed: int
    n_points: int
    extent: tuple[float, float] = (20.0, 20.0)
    class_mix: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    noise_sigma: float = 0.02

    def validate(self):
        if self.n_points < 1:
            raise ValueError(f"n_points must be >= 1, got {self.n_points}")
        if len(self.extent) != 2 or min(self.extent) <= 0:
            raise ValueError(f"extent components must be positive, got {self.extent}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        mix = np.asarray(self.class_mix, dtype=float)
        if len(mix) != len(CLASS_NAMES):
            raise ValueError(f"class_mix needs {len(CLASS_NAMES)} entries")
        if (mix < 0).any() or not (mix > 0).any():
            raise ValueError("class_mix entries must be nonnegative, one positive")


def class_allocation(spec: SceneSpec) -> np.ndarray:
    """Per-class point counts by largest-remainder apportionment of class_mix."""
    spec.validate()
    mix = np.asarray(spec.class_mix, dtype=float)
    exact = spec.n_points * mix / mix.sum()
    counts = np.floor(exact).astype(np.int64)
    remainder = spec.n_points - counts.sum()
    if remainder > 0:
        frac = exact - counts
        # deterministic: larger fraction first, then smaller class index
        order = np.lexsort((np.arange(len(mix)), -frac))
        counts[order[:remainder]] += 1
    return counts


def _trunc_normal(rng, sigma, size):
    """Gaussian noise clipped to +/-3 sigma (keeps geometry invariants exact)."""
    if sigma == 0:
        return np.zeros(size)
    return np.clip(rng.normal(0.0, sigma, size), -3 * sigma, 3 * sigma)


def _layout(spec: SceneSpec, rng):
    """Scene furniture: building boxes, tree canopies, powerline polylines."""
    ex, ey = spec.extent
    n_boxes = 1 + int(rng.integers(0, 3))
    boxes = []
    for _ in range(n_boxes):
        w, d = rng.uniform(2.0, 6.0, 2)
        x0 = rng.uniform(0, max(ex - w, 1e-6))
        y0 = rng.uniform(0, max(ey - d, 1e-6))
        h = rng.uniform(3.0, 8.0)
        boxes.append((x0, y0, x0 + w, y0 + d, h))
    n_trees = 2 + int(rng.integers(0, 4))
    canopies = rng.uniform([0, 0, 3.0], [ex, ey, 5.0], (n_trees, 3))
    n_lines = 1 + int(rng.integers(0, 2))
    lines = []
    for _ in range(n_lines):
        a = rng.uniform([0, 0], [ex, ey])
        b = rng.uniform([0, 0], [ex, ey])
        z = POWERLINE_HEIGHT + rng.uniform(0.0, 2.0)
        lines.append((a, b, z))
    return boxes, canopies, lines


def scene_layout(spec: SceneSpec):
    """Recompute the deterministic layout used by generate_scene."""
    spec.validate()
    return _layout(spec, np.random.default_rng(spec.rng_seed))


def _box_surface_points(rng, box, n, sigma):
    x0, y0, x1, y1, h = box
    w, d = x1 - x0, y1 - y0
    # roof plus four walls, sampled proportionally to area
    areas = np.array([w * d, d * h, d * h, w * h, w * h])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(0, 1, n)
    v = rng.uniform(0, 1, n)
    pts = np.empty((n, 3))
    off = _trunc_normal(rng, sigma, n)
    for i in range(n):
        if face[i] == 0:  # roof
            pts[i] = (x0 + u[i] * w, y0 + v[i] * d, h + off[i])
        elif face[i] == 1:  # x = x0 wall
            pts[i] = (x0 + off[i], y0 + u[i] * d, v[i] * h)
        elif face[i] == 2:  # x = x1 wall
            pts[i] = (x1 + off[i], y0 + u[i] * d, v[i] * h)
        elif face[i] == 3:  # y = y0 wall
            pts[i] = (x0 + u[i] * w, y0 + off[i], v[i] * h)
        else:  # y = y1 wall
            pts[i] = (x0 + u[i] * w, y1 + off[i], v[i] * h)
    return pts


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Generate a labeled scene; pure function of the spec."""
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    boxes, canopies, lines = _layout(spec, rng)
    counts = class_allocation(spec)
    ex, ey = spec.extent
    sigma = spec.noise_sigma

    parts_pos, parts_lab = [], []
    for cls, n in enumerate(counts):
        if n == 0:
            continue
        if cls == ROAD:
            xy = rng.uniform([0, 0], [ex, ey], (n, 2))
            z = np.abs(_trunc_normal(rng, sigma, n))
            pts = np.column_stack([xy, z])
        elif cls == BUILDING:
            per = np.full(len(boxes), n // len(boxes))
            per[: n % len(boxes)] += 1
            pts = np.concatenate(
                [_box_surface_points(rng, b, m, sigma) for b, m in zip(boxes, per) if m]
            )
        elif cls == GRASS:
            xy = rng.uniform([0, 0], [ex, ey], (n, 2))
            z = rng.uniform(0.05, 0.25, n) + _trunc_normal(rng, sigma, n)
            pts = np.column_stack([xy, z])
        elif cls == TREE:
            which = rng.integers(0, len(canopies), n)
            pts = canopies[which] + rng.normal(0, 1, (n, 3)) * [0.6, 0.6, 1.0]
        elif cls == SOIL:
            # bare patches: a couple of disks on the ground
            centers = rng.uniform([0, 0], [ex, ey], (2, 2))
            which = rng.integers(0, 2, n)
            r = np.sqrt(rng.uniform(0, 1, n)) * 2.5
            th = rng.uniform(0, 2 * np.pi, n)
            xy = centers[which] + np.column_stack([r * np.cos(th), r * np.sin(th)])
            z = np.abs(_trunc_normal(rng, sigma, n))
            pts = np.column_stack([xy, z])
        else:  # POWERLINE
            per = np.full(len(lines), n // len(lines))
            per[: n % len(lines)] += 1
            segs = []
            for (a, b, z0), m in zip(lines, per):
                if m == 0:
                    continue
                t = rng.uniform(0, 1, m)
                xy = a + t[:, None] * (b - a)
                z = z0 + np.abs(_trunc_normal(rng, sigma, m))
                segs.append(np.column_stack([xy, z]))
            pts = np.concatenate(segs)
        parts_pos.append(pts)
        parts_lab.append(np.full(len(pts), cls, dtype=np.int64))

    positions = np.concatenate(parts_pos)
    labels = np.concatenate(parts_lab)
    perm = rng.permutation(len(positions))
    positions, labels = positions[perm], labels[perm]

    reflect = REFLECTANCE[labels] + _trunc_normal(rng, sigma, len(labels))
    features = np.column_stack([positions[:, 2], reflect])
    return PointCloud(positions, features, labels, CLASS_NAMES)
