"""Minimal ASCII PLY writer for labeled/predicted/clustered points."""

from __future__ import annotations

import numpy as np


def write_ply(path, positions, labels, predictions, clusters) -> None:
    positions = np.asarray(positions)
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    clusters = np.asarray(clusters, dtype=np.int64)
    n = len(positions)
    if not (len(labels) == len(predictions) == len(clusters) == n):
        raise ValueError("all per-point arrays must have the same length")
    with open(path, "w") as fh:
        fh.write(
            "ply\nformat ascii 1.0\n"
            f"element vertex {n}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property int label\nproperty int pred\nproperty int cluster\n"
            "end_header\n"
        )
        for p, lab, pred, clu in zip(positions, labels, predictions, clusters):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {lab} {pred} {clu}\n")


def read_ply_vertex_count(path) -> int:
    with open(path) as fh:
        for line in fh:
            if line.startswith("element vertex"):
                return int(line.split()[-1])
    raise ValueError(f"{path}: no vertex element found")
