"""Token embedding, the two-module W-net assembly, losses, and fusion.

Each module runs project -> assign -> cluster-mean update -> self-attention
enhancement -> cross-attention reconstruction. Between the two modules the
supertoken set is sparsified to K = S/2 and bridged into module 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import attention as att
from .attention import MLP, QKVWeights
from .geometry import Block


@dataclass
class Prediction:
    logits1: torch.Tensor  # N x C_cls
    logits2: torch.Tensor  # N x C_cls
    fused_probs: torch.Tensor  # N x C_cls, rows sum to 1


def knn_indices(positions: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k nearest neighbors (including self) per point."""
    d = torch.cdist(positions, positions)
    return d.topk(k, dim=1, largest=False).indices


class TokenEmbedder(nn.Module):
    """Per-point MLP followed by k-nearest max-pooling and a mixing layer.

    Stands in for a heavyweight point/voxel feature extractor; it is
    permutation-equivariant and a function of positions and features only.
    """

    def __init__(self, in_channels, d_out, k_local=16, dtype=torch.float32,
                 generator=None):
        super().__init__()
        if k_local < 1:
            raise ValueError(f"k_local must be >= 1, got {k_local}")
        self.k_local = k_local
        self.point_mlp = MLP(in_channels, d_out, dtype=dtype, generator=generator)
        self.mix = MLP(2 * d_out, d_out, dtype=dtype, generator=generator)

    def forward(self, positions, features, neighbors=None):
        n = positions.shape[0]
        if self.k_local > n:
            raise ValueError(
                f"k_local={self.k_local} exceeds block size {n}"
            )
        x = torch.cat([positions, features], dim=1)
        # per-block standardization keeps the MLP input well-scaled regardless
        # of scene extent or feature units, and preserves permutation equivariance
        x = (x - x.mean(dim=0, keepdim=True)) / x.std(dim=0, keepdim=True).clamp_min(1e-6)
        h = self.point_mlp(x)
        if neighbors is None:
            neighbors = knn_indices(positions, self.k_local)
        pooled = h[neighbors].max(dim=1).values
        return self.mix(torch.cat([h, pooled], dim=1))


class ClusterModule(nn.Module):
    """One W-net module: learnable supertokens plus its attention blocks."""

    def __init__(self, d, n_supertokens, dtype=torch.float32, generator=None):
        super().__init__()
        self.d = d
        self.n_supertokens = n_supertokens
        # zero-mean Gaussian init, std 1/sqrt(D)
        self.initial_supertokens = nn.Parameter(
            torch.randn(n_supertokens, d, dtype=dtype, generator=generator)
            / (d ** 0.5)
        )
        self.dso = QKVWeights(d, dtype=dtype, generator=generator)
        self.dfe = QKVWeights(d, dtype=dtype, generator=generator)
        self.cau_head = MLP(d, 2 * d, dtype=dtype, generator=generator)

    def cluster(self, tokens, assign_mode, initial=None):
        """project -> assign -> cluster-mean update -> enhancement."""
        supertokens = self.initial_supertokens if initial is None else initial
        q, k, v = att.project_qkv(tokens, supertokens, self.dso)
        if assign_mode == "hard":
            cam = att.hard_assign(q, k)
        elif assign_mode == "soft":
            cam = att.soft_assign(q, k)
        else:
            raise ValueError(f"assign_mode must be 'hard' or 'soft', got {assign_mode!r}")
        updated = att.supertoken_update(cam, v, supertokens)
        enhanced = att.dfe_enhance(updated, self.dfe)
        return enhanced, cam

    def run(self, tokens, assign_mode, initial=None):
        """Full module pass; returns (reconstructed, enhanced, cam)."""
        enhanced, cam = self.cluster(tokens, assign_mode, initial)
        reconstructed = att.cau_reconstruct(tokens, cam, enhanced, self.cau_head)
        return reconstructed, enhanced, cam


class WNet(nn.Module):
    """Two cascading cluster modules with sparsification in between.

    Module 2 consumes module 1's reconstructed tokens (width 2*D1) and its
    initial supertokens are the bridged top-K GLocal rows of module 1.
    """

    def __init__(self, in_channels, n_classes, d1=32, n_supertokens=64,
                 k_local=16, temperature=1.0, dtype=torch.float32, seed=0):
        super().__init__()
        if n_supertokens < 2:
            raise ValueError(f"need at least 2 supertokens, got {n_supertokens}")
        gen = torch.Generator().manual_seed(seed)
        d2 = 2 * d1
        self.d1, self.d2 = d1, d2
        self.n_supertokens = n_supertokens
        self.n_classes = n_classes
        self.temperature = temperature
        self.embedder = TokenEmbedder(3 + in_channels, d1, k_local, dtype, gen)
        self.module1 = ClusterModule(d1, n_supertokens, dtype, gen)
        self.sts_local = MLP(d1, d1, dtype=dtype, generator=gen)
        self.sts_global = MLP(d1, d1, dtype=dtype, generator=gen)
        self.sts_score = MLP(2 * d1, 2, dtype=dtype, generator=gen)
        self.bridge = nn.Linear(2 * d1, d2, dtype=dtype)
        with torch.no_grad():
            self.bridge.weight.copy_(
                torch.randn(d2, 2 * d1, dtype=dtype, generator=gen) / (2 * d1) ** 0.5
            )
            self.bridge.bias.zero_()
        self.module2 = ClusterModule(d2, n_supertokens // 2, dtype, gen)
        self.head1 = MLP(2 * d1, n_classes, dtype=dtype, generator=gen)
        self.head2 = MLP(2 * d2, n_classes, dtype=dtype, generator=gen)

    def sparsify(self, enhanced, training, rng_seed):
        """GLocal scoring and Gumbel top-K keep; K = S/2."""
        glocal = att.glocal_embed(enhanced, self.sts_local, self.sts_global)
        psi = att.decision_scores(glocal, self.sts_score)
        sel = att.gumbel_topk_keep(
            psi, self.n_supertokens // 2, self.temperature, training, rng_seed
        )
        kept = glocal[sel.indices] * sel.gates.unsqueeze(1)
        return self.bridge(kept), sel

    def forward(self, positions, features, assign_mode="hard", training=False,
                rng_seed=0, neighbors=None, unet=False):
        tokens = self.embedder(positions, features, neighbors)
        if unet:
            return self._unet_tail(tokens, assign_mode, training, rng_seed)
        r1, e1, _cam1 = self.module1.run(tokens, assign_mode)
        s2_init, _sel = self.sparsify(e1, training, rng_seed)
        r2, _e2, _cam2 = self.module2.run(r1, assign_mode, initial=s2_init)
        return self._predict(r1, r2)

    def _unet_tail(self, tokens, assign_mode, training, rng_seed):
        # encoder-decoder ablation: both reconstructions are deferred until
        # after module 2, which therefore clusters the lifted raw tokens
        # instead of module 1's CAM-guided reconstruction
        e1, cam1 = self.module1.cluster(tokens, assign_mode)
        s2_init, _sel = self.sparsify(e1, training, rng_seed)
        lifted = self.module1.cau_head(tokens)
        e2, cam2 = self.module2.cluster(lifted, assign_mode, initial=s2_init)
        r2 = att.cau_reconstruct(lifted, cam2, e2, self.module2.cau_head)
        r1 = att.cau_reconstruct(tokens, cam1, e1, self.module1.cau_head)
        return self._predict(r1, r2)

    def _predict(self, r1, r2):
        logits1 = self.head1(r1)
        logits2 = self.head2(r2)
        fused = (torch.softmax(logits1, dim=1) + torch.softmax(logits2, dim=1))
        fused = fused / fused.sum(dim=1, keepdim=True)
        return Prediction(logits1=logits1, logits2=logits2, fused_probs=fused)


def block_tensors(block: Block, dtype=torch.float32):
    """Positions, features, labels of a block as torch tensors."""
    pos = torch.as_tensor(block.cloud.positions, dtype=dtype)
    feat = torch.as_tensor(block.cloud.features, dtype=dtype)
    labels = torch.as_tensor(block.cloud.labels, dtype=torch.long)
    return pos, feat, labels


def embed_tokens(block: Block, embedder: TokenEmbedder) -> torch.Tensor:
    """Embed one block's points into tokens."""
    pos, feat, _ = block_tensors(block, dtype=embedder.point_mlp.w1.dtype)
    return embedder(pos, feat)


def wnet_forward(block: Block, net: WNet, assign_mode="hard", training=False,
                 rng_seed=0) -> Prediction:
    pos, feat, _ = block_tensors(block, dtype=net.bridge.weight.dtype)
    return net(pos, feat, assign_mode, training, rng_seed)


def ablate_unet_forward(block: Block, net: WNet, assign_mode="hard",
                        training=False, rng_seed=0) -> Prediction:
    pos, feat, _ = block_tensors(block, dtype=net.bridge.weight.dtype)
    return net(pos, feat, assign_mode, training, rng_seed, unet=True)


def weighted_cross_entropy(logits, labels, class_weights):
    """Mean over points of class-weighted negative log-likelihood."""
    n_cls = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_cls:
        raise ValueError(f"label out of range [0,{n_cls})")
    log_probs = F.log_softmax(logits, dim=1)
    nll = -log_probs[torch.arange(len(labels)), labels]
    return (class_weights[labels] * nll).mean()


def wnet_loss(pred: Prediction, labels, class_weights) -> torch.Tensor:
    """Sum of the two heads' weighted cross-entropies."""
    if (class_weights <= 0).any():
        raise ValueError("class weights must be positive")
    return (weighted_cross_entropy(pred.logits1, labels, class_weights)
            + weighted_cross_entropy(pred.logits2, labels, class_weights))
