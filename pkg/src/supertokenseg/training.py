"""SGD-with-momentum training loop: cosine annealing, weighted CE, class
weights, deterministic shuffling, history recording, and checkpointing."""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .geometry import Block
from .metrics import ConfusionMatrix, derive_metrics
from .network import WNet, block_tensors, knn_indices, wnet_loss

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 250
    batch_size: int = 16
    rng_seed: int = 0
    assign_mode: str = "hard"
    eval_every: int = 10
    clip_norm: float = 5.0  # global gradient-norm clip; 0 disables

    def validate(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.assign_mode not in ("hard", "soft"):
            raise ValueError(f"assign_mode must be hard|soft, got {self.assign_mode}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.clip_norm < 0:
            raise ValueError(f"clip_norm must be >= 0, got {self.clip_norm}")


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """lr0 * (1 + cos(pi * epoch / epochs)) / 2."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} out of range [0,{config.epochs})")
    return config.lr0 * (1 + math.cos(math.pi * epoch / config.epochs)) / 2


class OptimizerState:
    """Velocity buffers keyed by parameter name."""

    def __init__(self, net: torch.nn.Module):
        self.velocity = {
            name: torch.zeros_like(p) for name, p in net.named_parameters()
        }


@torch.no_grad()
def sgd_step(net: torch.nn.Module, state: OptimizerState, lr: float,
             config: TrainConfig) -> None:
    """g = grad + wd*p; v = momentum*v + g; p -= lr*v, per tensor.

    Gradients are first rescaled so their global norm does not exceed
    config.clip_norm (when positive), which guards the occasional step
    where the cross-attention assignments reshuffle abruptly.
    """
    named = [(n, p) for n, p in net.named_parameters() if p.grad is not None]
    for name, p in named:
        if not torch.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    scale = 1.0
    if config.clip_norm > 0 and named:
        total = torch.sqrt(sum((p.grad ** 2).sum() for _, p in named))
        if float(total) > config.clip_norm:
            scale = config.clip_norm / float(total)
    for name, p in named:
        g = p.grad * scale + config.weight_decay * p
        v = state.velocity[name]
        v.mul_(config.momentum).add_(g)
        p.add_(v, alpha=-lr)


def class_weights(labels, n_classes: int) -> torch.Tensor:
    """Inverse-frequency weights N/(C*N_c), normalized to mean 1.

    Classes absent from the labels get the largest present weight before
    normalization.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot compute class weights from an empty label set")
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = labels.size / (n_classes * counts[present])
    w[~present] = w[present].max()
    w /= w.mean()
    return torch.as_tensor(w)


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    eval_oa: float | None = None
    eval_miou: float | None = None
    eval_avg_f1: float | None = None


@dataclass
class TrainResult:
    history: list[HistoryRow]
    best_miou: float
    best_state: dict = field(repr=False)


HISTORY_HEADER = "epoch,lr,train_loss,eval_OA,eval_mIoU,eval_avgF1"


def history_csv(history: list[HistoryRow]) -> str:
    lines = [HISTORY_HEADER]
    for r in history:
        evals = (
            f"{r.eval_oa:.6f},{r.eval_miou:.6f},{r.eval_avg_f1:.6f}"
            if r.eval_oa is not None
            else ",,"
        )
        lines.append(f"{r.epoch},{r.lr:.8f},{r.train_loss:.8f},{evals}")
    return "\n".join(lines) + "\n"


def _prepare(blocks: list[Block], net: WNet):
    """Tensors plus cached embedder neighbor indices, one tuple per block."""
    dtype = net.bridge.weight.dtype
    out = []
    for b in blocks:
        pos, feat, labels = block_tensors(b, dtype=dtype)
        out.append((pos, feat, labels, knn_indices(pos, net.embedder.k_local)))
    return out


def _gumbel_seed(base: int, epoch: int, index: int) -> int:
    return (base * 1_000_003 + epoch * 10_007 + index) % (2 ** 63)


@torch.no_grad()
def evaluate(blocks, net: WNet, assign_mode: str, class_names,
             prepared=None, unet: bool = False):
    """Fused-prediction confusion matrix over a list of blocks (eval mode)."""
    cm = ConfusionMatrix(class_names)
    data = prepared if prepared is not None else _prepare(blocks, net)
    for pos, feat, labels, nbr in data:
        pred = net(pos, feat, assign_mode, training=False, neighbors=nbr,
                   unet=unet)
        cm.accumulate(pred.fused_probs.argmax(dim=1).numpy(), labels.numpy())
    return derive_metrics(cm)


def train(dataset: list[Block], config: TrainConfig, net: WNet,
          eval_dataset: list[Block] | None = None,
          start_epoch: int = 0, stop_epoch: int | None = None,
          state: OptimizerState | None = None,
          track_best: bool = True, unet: bool = False) -> TrainResult:
    """Run the epoch loop; deterministic given config.rng_seed.

    Evaluates every `eval_every` epochs on `eval_dataset` (the training set
    when none is given) and retains the best-mIoU parameter snapshot.
    `stop_epoch` truncates the run at an epoch boundary (the cosine schedule
    still spans config.epochs) so it can be checkpointed and resumed.
    """
    config.validate()
    if stop_epoch is None:
        stop_epoch = config.epochs
    if not start_epoch <= stop_epoch <= config.epochs:
        raise ValueError(
            f"need start_epoch <= stop_epoch <= epochs, got "
            f"{start_epoch}, {stop_epoch}, {config.epochs}"
        )
    if not dataset:
        raise ValueError("dataset must be nonempty")
    class_names = dataset[0].cloud.class_names
    all_labels = np.concatenate([b.cloud.labels for b in dataset])
    weights = class_weights(all_labels, len(class_names)).to(net.bridge.weight.dtype)

    prepared = _prepare(dataset, net)
    prepared_eval = (
        _prepare(eval_dataset, net) if eval_dataset is not None else prepared
    )
    if state is None:
        state = OptimizerState(net)

    history: list[HistoryRow] = []
    best_miou = -1.0
    best_state = copy.deepcopy(net.state_dict()) if track_best else {}

    for epoch in range(start_epoch, stop_epoch):
        lr = cosine_lr(epoch, config)
        # per-epoch shuffle seeded independently so resumed runs align
        order = np.random.default_rng((config.rng_seed, epoch)).permutation(
            len(prepared)
        )
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            net.zero_grad()
            batch_loss = torch.zeros((), dtype=net.bridge.weight.dtype)
            for j in batch:
                pos, feat, labels, nbr = prepared[j]
                pred = net(
                    pos, feat, config.assign_mode, training=True,
                    rng_seed=_gumbel_seed(config.rng_seed, epoch, int(j)),
                    neighbors=nbr, unet=unet,
                )
                batch_loss = batch_loss + wnet_loss(pred, labels, weights)
            batch_loss = batch_loss / len(batch)
            batch_loss.backward()
            sgd_step(net, state, lr, config)
            epoch_loss += float(batch_loss.detach()) * len(batch)
        row = HistoryRow(epoch=epoch, lr=lr, train_loss=epoch_loss / len(order))

        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            report = evaluate(
                None, net, config.assign_mode, class_names,
                prepared=prepared_eval, unet=unet,
            )
            row.eval_oa, row.eval_miou, row.eval_avg_f1 = (
                report.oa, report.miou, report.avg_f1,
            )
            if track_best and report.miou > best_miou:
                best_miou = report.miou
                best_state = copy.deepcopy(net.state_dict())
        history.append(row)

    return TrainResult(history=history, best_miou=best_miou, best_state=best_state)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def config_digest(arch: dict) -> str:
    """Stable digest of the architecture fields a checkpoint depends on."""
    canon = ",".join(f"{k}={arch[k]}" for k in sorted(arch))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_checkpoint(path, net: WNet, digest: str, epoch: int = 0,
                    state: OptimizerState | None = None,
                    best_state: dict | None = None, best_miou: float = -1.0):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_digest": digest,
        "epoch": epoch,
        "params": {k: v.clone() for k, v in net.state_dict().items()},
        "velocity": (
            {k: v.clone() for k, v in state.velocity.items()} if state else None
        ),
        "best_params": best_state,
        "best_miou": best_miou,
    }
    torch.save(payload, path)


def load_checkpoint(path, net: WNet, digest: str, use_best: bool = False):
    """Load parameters into `net`; rejects version/digest/shape mismatch."""
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    if payload["config_digest"] != digest:
        raise ConfigError(
            f"checkpoint digest {payload['config_digest']} does not match "
            f"configured architecture digest {digest}"
        )
    params = payload["best_params"] if use_best and payload["best_params"] else (
        payload["params"]
    )
    current = net.state_dict()
    if set(params) != set(current):
        raise ConfigError("checkpoint parameter names do not match the network")
    for k, v in params.items():
        if v.shape != current[k].shape:
            raise ConfigError(
                f"checkpoint tensor {k!r} has shape {tuple(v.shape)}, "
                f"expected {tuple(current[k].shape)}"
            )
    net.load_state_dict(params)
    return payload
