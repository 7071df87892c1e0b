"""Run configuration: a flat `key = value` text file with strict keys.

Unknown keys are rejected; embedded invariants (scene spec, training
hyperparameters, architecture sizes) are validated at load time.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError
from .synthdata import CLASS_NAMES, SceneSpec
from .training import TrainConfig, config_digest


@dataclass
class RunConfig:
    # scene generation
    n_scenes: int = 8
    scene_seed: int = 1
    extent_x: float = 20.0
    extent_y: float = 20.0
    points_per_scene: int = 2048
    class_mix: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    noise_sigma: float = 0.02
    # data location and preprocessing
    data_dir: str = ""
    grid_cell: float = 0.01
    seed_spacing: float = 100.0
    block_k: int = 2048
    holdout_fraction: float = 0.25
    # architecture
    d1: int = 32
    s: int = 64
    k_local: int = 16
    temperature: float = 1.0
    assign_mode: str = "hard"
    # training
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 250
    batch_size: int = 16
    rng_seed: int = 0
    eval_every: int = 10
    clip_norm: float = 5.0

    def validate(self):
        if self.n_scenes < 1:
            raise ConfigError(f"n_scenes must be >= 1, got {self.n_scenes}")
        if not self.grid_cell > 0:
            raise ConfigError(f"grid_cell must be positive, got {self.grid_cell}")
        if not self.seed_spacing > 0:
            raise ConfigError(f"seed_spacing must be positive, got {self.seed_spacing}")
        if self.block_k < 1:
            raise ConfigError(f"block_k must be >= 1, got {self.block_k}")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError(
                f"holdout_fraction must be in [0,1), got {self.holdout_fraction}"
            )
        if self.d1 < 1 or self.s < 2:
            raise ConfigError(f"need d1 >= 1 and s >= 2, got d1={self.d1} s={self.s}")
        if self.k_local > self.block_k:
            raise ConfigError(
                f"k_local={self.k_local} exceeds block size {self.block_k}"
            )
        try:
            self.scene_spec(0).validate()
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def scene_spec(self, index: int) -> SceneSpec:
        return SceneSpec(
            rng_seed=self.scene_seed + index,
            n_points=self.points_per_scene,
            extent=(self.extent_x, self.extent_y),
            class_mix=tuple(self.class_mix),
            noise_sigma=self.noise_sigma,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0, momentum=self.momentum, weight_decay=self.weight_decay,
            epochs=self.epochs, batch_size=self.batch_size, rng_seed=self.rng_seed,
            assign_mode=self.assign_mode, eval_every=self.eval_every,
            clip_norm=self.clip_norm,
        )

    def arch_digest(self, in_channels: int = 2,
                    n_classes: int = len(CLASS_NAMES)) -> str:
        return config_digest({
            "in_channels": in_channels,
            "n_classes": n_classes,
            "d1": self.d1,
            "s": self.s,
            "k_local": self.k_local,
            "temperature": self.temperature,
        })


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str, default):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(","))
    return raw


def load_config(path) -> RunConfig:
    cfg = RunConfig()
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        try:
            value = _parse_value(key, raw, getattr(cfg, key))
        except ValueError:
            raise ConfigError(
                f"{path}: line {lineno}: bad value {raw!r} for key {key!r}"
            ) from None
        setattr(cfg, key, value)
    cfg.validate()
    return cfg
