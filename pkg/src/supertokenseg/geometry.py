"""Point cloud ingestion and preprocessing.

Grid subsampling, coordinate offsetting, and knn block extraction, plus the
labeled-point text format used for scene files. All operations are pure
functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class PointCloud:
    """A labeled point cloud: positions (N,3), features (N,C), labels (N,)."""

    positions: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = tuple(self.class_names)
        n = len(self.positions)
        if n < 1:
            raise ValueError("PointCloud must contain at least one point")
        if self.positions.shape != (n, 3):
            raise ValueError(f"positions must be (N,3), got {self.positions.shape}")
        if self.features.ndim != 2 or len(self.features) != n:
            raise ValueError(
                f"features must be (N,C) with N={n}, got {self.features.shape}"
            )
        if self.labels.shape != (n,):
            raise ValueError(f"labels must be (N,), got {self.labels.shape}")
        if not np.isfinite(self.positions).all():
            raise ValueError("positions contain NaN or infinite coordinates")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise ValueError("labels must index into class_names")

    @property
    def n_points(self) -> int:
        return len(self.positions)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass
class Block:
    """A fixed-size knn neighborhood used as one network input."""

    cloud: PointCloud
    centroid: np.ndarray
    source_indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=np.float64)
        self.source_indices = np.asarray(self.source_indices, dtype=np.int64)
        if len(self.source_indices) != self.cloud.n_points:
            raise ValueError("source_indices length must equal block size")


def grid_subsample(cloud: PointCloud, cell: float) -> PointCloud:
    """Collapse each occupied voxel of side `cell` to a single point.

    Output position/features are the cell mean; the label is the majority
    label of the cell (ties broken by smallest class index). Output points
    are ordered by lexicographic voxel index, which makes the operation
    idempotent and deterministic.
    """
    if not cell > 0:
        raise ValueError(f"cell must be positive, got {cell}")
    keys = np.floor(cloud.positions / cell).astype(np.int64)
    _, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    inverse = inverse.ravel()
    n_cells = len(counts)

    pos = np.zeros((n_cells, 3))
    np.add.at(pos, inverse, cloud.positions)
    pos /= counts[:, None]

    feat = np.zeros((n_cells, cloud.n_features))
    np.add.at(feat, inverse, cloud.features)
    feat /= counts[:, None]

    n_cls = len(cloud.class_names)
    label_counts = np.bincount(
        inverse * n_cls + cloud.labels, minlength=n_cells * n_cls
    ).reshape(n_cells, n_cls)
    labels = label_counts.argmax(axis=1)  # argmax takes the smallest index on ties

    return PointCloud(pos, feat, labels, cloud.class_names)


def offset_coordinates(cloud: PointCloud) -> PointCloud:
    """Translate the cloud so its per-axis minimum corner is the origin."""
    shifted = cloud.positions - cloud.positions.min(axis=0)
    return PointCloud(shifted, cloud.features, cloud.labels, cloud.class_names)


def _take_block(cloud: PointCloud, seed: np.ndarray, k: int) -> Block:
    """k nearest points to `seed`, padded cyclically when the cloud is small."""
    d2 = np.square(cloud.positions - seed).sum(axis=1)
    order = np.lexsort((np.arange(cloud.n_points), d2))
    idx = order[: min(k, cloud.n_points)]
    if len(idx) < k:
        idx = idx[np.arange(k) % len(idx)]
    sub = PointCloud(
        cloud.positions[idx], cloud.features[idx], cloud.labels[idx], cloud.class_names
    )
    return Block(cloud=sub, centroid=seed, source_indices=idx)


def knn_block_split(cloud: PointCloud, k: int, seed_spacing: float) -> list[Block]:
    """Split a cloud into fixed-size knn blocks.

    Seeds are the centroids of occupied cells of a 2D grid of pitch
    `seed_spacing` over the XY extent. Every point is guaranteed to appear
    in at least one block: points left uncovered by the grid blocks get
    supplementary blocks seeded at the lowest-index uncovered point.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not seed_spacing > 0:
        raise ValueError(f"seed_spacing must be positive, got {seed_spacing}")

    xy = cloud.positions[:, :2]
    cells = np.floor((xy - xy.min(axis=0)) / seed_spacing).astype(np.int64)
    _, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    seeds = np.zeros((len(counts), 3))
    np.add.at(seeds, inverse, cloud.positions)
    seeds /= counts[:, None]

    blocks = [_take_block(cloud, seed, k) for seed in seeds]

    covered = np.zeros(cloud.n_points, dtype=bool)
    for b in blocks:
        covered[b.source_indices] = True
    while not covered.all():
        seed_idx = int(np.flatnonzero(~covered)[0])
        b = _take_block(cloud, cloud.positions[seed_idx], k)
        covered[b.source_indices] = True
        blocks.append(b)
    return blocks


# ---------------------------------------------------------------------------
# Labeled-point text format
#
# Header: "#columns N_features=<C> classes=<name1,name2,...>"
# Body:   one point per line, "x y z f1 ... fC label"
# ---------------------------------------------------------------------------


def write_labeled_points(cloud: PointCloud, path) -> None:
    with open(path, "w") as fh:
        names = ",".join(cloud.class_names)
        fh.write(f"#columns N_features={cloud.n_features} classes={names}\n")
        for p, f, lab in zip(cloud.positions, cloud.features, cloud.labels):
            cols = [f"{v:.10g}" for v in p] + [f"{v:.10g}" for v in f] + [str(lab)]
            fh.write(" ".join(cols) + "\n")


def read_labeled_points(path) -> PointCloud:
    """Parse the labeled-point text format, rejecting malformed lines."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("#columns "):
            raise DataError(f"{path}: line 1: missing '#columns' header")
        fields = dict(
            part.split("=", 1) for part in header[len("#columns "):].split() if "=" in part
        )
        if "N_features" not in fields or "classes" not in fields:
            raise DataError(f"{path}: line 1: header needs N_features= and classes=")
        try:
            n_feat = int(fields["N_features"])
        except ValueError:
            raise DataError(f"{path}: line 1: N_features is not an integer") from None
        class_names = tuple(fields["classes"].split(","))

        positions, features, labels = [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 + n_feat + 1:
                raise DataError(
                    f"{path}: line {lineno}: expected {3 + n_feat + 1} columns, "
                    f"got {len(parts)}"
                )
            try:
                vals = [float(v) for v in parts[:-1]]
                lab = int(parts[-1])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-numeric column") from None
            if not 0 <= lab < len(class_names):
                raise DataError(f"{path}: line {lineno}: label {lab} out of range")
            positions.append(vals[:3])
            features.append(vals[3:])
            labels.append(lab)

    if not positions:
        raise DataError(f"{path}: no data lines")
    return PointCloud(
        np.array(positions), np.array(features), np.array(labels), class_names
    )
