"""Glue between config, data files, preprocessing, and training runs.

Shared by the CLI and the acceptance suite so both exercise the exact same
path: scene files -> grid subsample -> offset -> knn blocks -> train/eval.
"""

from __future__ import annotations

import os

import numpy as np

from .config import RunConfig
from .errors import DataError
from .geometry import (
    Block,
    PointCloud,
    grid_subsample,
    knn_block_split,
    offset_coordinates,
    read_labeled_points,
    write_labeled_points,
)
from .network import WNet
from .synthdata import generate_scene
from .training import (
    OptimizerState,
    TrainResult,
    history_csv,
    load_checkpoint,
    save_checkpoint,
    train,
)


def synth_scenes(cfg: RunConfig, out_dir) -> list[str]:
    """Generate cfg.n_scenes scene files into out_dir; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(cfg.n_scenes):
        cloud = generate_scene(cfg.scene_spec(i))
        path = os.path.join(out_dir, f"scene_{i:03d}.txt")
        write_labeled_points(cloud, path)
        paths.append(path)
    return paths


def load_scenes(data_dir) -> list[PointCloud]:
    if not os.path.isdir(data_dir):
        raise DataError(f"dataset path {data_dir!r} does not exist")
    files = sorted(
        f for f in os.listdir(data_dir) if f.endswith(".txt")
    )
    if not files:
        raise DataError(f"dataset path {data_dir!r} contains no .txt scene files")
    return [read_labeled_points(os.path.join(data_dir, f)) for f in files]


def preprocess_scene(cloud: PointCloud, cfg: RunConfig) -> list[Block]:
    cloud = grid_subsample(cloud, cfg.grid_cell)
    cloud = offset_coordinates(cloud)
    return knn_block_split(cloud, cfg.block_k, cfg.seed_spacing)


def split_blocks(scenes: list[PointCloud], cfg: RunConfig):
    """Deterministic scene-level train/holdout split (last scenes held out)."""
    n_hold = int(round(len(scenes) * cfg.holdout_fraction))
    train_scenes = scenes[: len(scenes) - n_hold]
    hold_scenes = scenes[len(scenes) - n_hold:]
    train_blocks = [b for s in train_scenes for b in preprocess_scene(s, cfg)]
    hold_blocks = [b for s in hold_scenes for b in preprocess_scene(s, cfg)]
    return train_blocks, hold_blocks


def build_net(cfg: RunConfig, in_channels: int, n_classes: int) -> WNet:
    return WNet(
        in_channels=in_channels,
        n_classes=n_classes,
        d1=cfg.d1,
        n_supertokens=cfg.s,
        k_local=cfg.k_local,
        temperature=cfg.temperature,
        seed=cfg.rng_seed,
    )


def run_training(cfg: RunConfig, out_dir, resume_from=None) -> TrainResult:
    """Full training run; writes checkpoint.pt and history.csv to out_dir."""
    scenes = load_scenes(cfg.data_dir)
    train_blocks, hold_blocks = split_blocks(scenes, cfg)
    if not train_blocks:
        raise DataError("no training blocks after the holdout split")
    in_channels = train_blocks[0].cloud.n_features
    n_classes = len(train_blocks[0].cloud.class_names)
    net = build_net(cfg, in_channels, n_classes)
    digest = cfg.arch_digest(in_channels, n_classes)

    state = OptimizerState(net)
    start_epoch = 0
    if resume_from is not None:
        payload = load_checkpoint(resume_from, net, digest)
        start_epoch = payload["epoch"]
        if payload["velocity"] is not None:
            for name, v in payload["velocity"].items():
                state.velocity[name].copy_(v)

    result = train(
        train_blocks, cfg.train_config(), net,
        eval_dataset=hold_blocks if hold_blocks else None,
        start_epoch=start_epoch, state=state,
    )
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(
        os.path.join(out_dir, "checkpoint.pt"), net, digest,
        epoch=cfg.epochs, state=state,
        best_state=result.best_state, best_miou=result.best_miou,
    )
    with open(os.path.join(out_dir, "history.csv"), "w") as fh:
        fh.write(history_csv(result.history))
    return result


def per_class_counts(cloud: PointCloud) -> np.ndarray:
    return np.bincount(cloud.labels, minlength=len(cloud.class_names))
