"""Differentiable token/supertoken operations.

Covers cluster-center projection and assignment, cluster-mean supertoken
updates, residual self-attention enhancement, cross-attention-guided token
reconstruction, GLocal embedding, keep/drop decision scoring, and
Gumbel-perturbed top-K supertoken selection.

All functions operate on torch tensors; assignment in hard mode is treated
as a constant in backward (no gradient through the argmax).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

_EPS = 1e-20


@dataclass
class AssignmentMap:
    """S x N token-to-supertoken assignment; one-hot columns in hard mode."""

    matrix: torch.Tensor
    mode: str  # "hard" | "soft"


@dataclass
class DecisionScores:
    """S x 2 rows of (keep, drop) probabilities; each row sums to 1."""

    matrix: torch.Tensor

    @property
    def keep(self) -> torch.Tensor:
        return self.matrix[:, 0]


@dataclass
class SparsifySelection:
    """Top-K selection result: sorted indices plus per-index soft gates."""

    indices: list[int]
    gates: torch.Tensor  # aligned with indices; all-ones in eval mode


class QKVWeights(nn.Module):
    """Square query/key/value projection matrices of width d."""

    def __init__(self, d, dtype=torch.float32, generator=None):
        super().__init__()
        scale = 1.0 / math.sqrt(d)
        self.w_q = nn.Parameter(torch.randn(d, d, dtype=dtype, generator=generator) * scale)
        self.w_k = nn.Parameter(torch.randn(d, d, dtype=dtype, generator=generator) * scale)
        self.w_v = nn.Parameter(torch.randn(d, d, dtype=dtype, generator=generator) * scale)

    @property
    def width(self) -> int:
        return self.w_q.shape[0]


class MLP(nn.Module):
    """Two-layer perceptron with one ReLU hidden layer of the output width."""

    def __init__(self, d_in, d_out, dtype=torch.float32, generator=None):
        super().__init__()
        def init(rows, cols):
            return nn.Parameter(
                torch.randn(rows, cols, dtype=dtype, generator=generator)
                / math.sqrt(rows)
            )
        self.w1 = init(d_in, d_out)
        self.b1 = nn.Parameter(torch.zeros(d_out, dtype=dtype))
        self.w2 = init(d_out, d_out)
        self.b2 = nn.Parameter(torch.zeros(d_out, dtype=dtype))

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(
                f"MLP input width {x.shape[-1]} does not match weights ({self.d_in})"
            )
        return F.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


def _check_width(name_a, a, name_b, b):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(
            f"width mismatch: {name_a} has D={a.shape[-1]}, {name_b} has D={b.shape[-1]}"
        )


def project_qkv(tokens, supertokens, weights: QKVWeights):
    """Q = supertokens @ W_Q (S x D); K, V = tokens @ W_K, W_V (N x D)."""
    _check_width("tokens", tokens, "supertokens", supertokens)
    _check_width("tokens", tokens, "projection weights", weights.w_q)
    return supertokens @ weights.w_q, tokens @ weights.w_k, tokens @ weights.w_v


def attention_scores(q, k):
    _check_width("Q", q, "K", k)
    return (q @ k.T) / math.sqrt(q.shape[-1])


def hard_assign(q, k) -> AssignmentMap:
    """One-hot column-wise argmax of Q K^T / sqrt(D); ties go to the
    smallest supertoken index. Constant in backward."""
    scores = attention_scores(q, k).detach()
    s = scores.shape[0]
    top = scores.max(dim=0, keepdim=True).values
    # weight candidate rows by descending rank so argmax lands on the smallest index
    rank = torch.arange(s, 0, -1, device=scores.device).view(s, 1)
    idx = ((scores == top).long() * rank).argmax(dim=0)
    cam = torch.zeros_like(scores)
    cam[idx, torch.arange(scores.shape[1], device=scores.device)] = 1.0
    return AssignmentMap(matrix=cam, mode="hard")


def soft_assign(q, k) -> AssignmentMap:
    """Column-wise softmax of Q K^T / sqrt(D)."""
    return AssignmentMap(matrix=torch.softmax(attention_scores(q, k), dim=0), mode="soft")


def supertoken_update(cam: AssignmentMap, v, fallback):
    """Assignment-weighted mean of V per supertoken (S x D).

    Rows with zero assigned mass copy the corresponding fallback row.
    """
    m = cam.matrix
    if m.shape[1] != v.shape[0]:
        raise ShapeError(
            f"assignment map has N={m.shape[1]} columns but V has N={v.shape[0]} rows"
        )
    if fallback.shape[0] != m.shape[0]:
        raise ShapeError(
            f"assignment map has S={m.shape[0]} rows but fallback has S={fallback.shape[0]}"
        )
    mass = m.sum(dim=1, keepdim=True)
    mean = (m @ v) / mass.clamp_min(_EPS)
    return torch.where(mass > 0, mean, fallback)


def dfe_enhance(supertokens, weights: QKVWeights, return_attention: bool = False):
    """Residual self-attention among supertokens; attention matrix is S x S."""
    q, k, v = (supertokens @ weights.w_q, supertokens @ weights.w_k,
               supertokens @ weights.w_v)
    attn = torch.softmax(attention_scores(q, k), dim=1)
    out = supertokens + attn @ v
    if return_attention:
        return out, attn
    return out


def cau_reconstruct(tokens, cam: AssignmentMap, enhanced, head: MLP):
    """Broadcast enhanced supertokens back through the transposed assignment
    map and lift the result: MLP(T + CAM^T S_E), output N x 2D."""
    if cam.matrix.shape[0] != enhanced.shape[0]:
        raise ShapeError(
            f"assignment map has S={cam.matrix.shape[0]} rows but enhanced "
            f"supertokens have S={enhanced.shape[0]}"
        )
    _check_width("tokens", tokens, "enhanced supertokens", enhanced)
    return head(tokens + cam.matrix.T @ enhanced)


def glocal_embed(enhanced, local_mlp: MLP, global_mlp: MLP):
    """[local, repeated global mean] concatenation, S x 2D."""
    local = local_mlp(enhanced)
    global_row = global_mlp(enhanced).mean(dim=0, keepdim=True)
    return torch.cat([local, global_row.expand(enhanced.shape[0], -1)], dim=1)


def decision_scores(glocal, score_mlp: MLP) -> DecisionScores:
    """Row-wise softmax over the score head's (keep, drop) logits."""
    return DecisionScores(matrix=torch.softmax(score_mlp(glocal), dim=1))


def gumbel_topk_keep(
    scores: DecisionScores,
    k: int,
    temperature: float = 1.0,
    training: bool = False,
    rng_seed: int = 0,
) -> SparsifySelection:
    """Select K supertokens by keep-probability.

    Training mode perturbs log keep-probabilities with seeded Gumbel(0,1)
    noise and returns soft gates (the softmax relaxation at `temperature`,
    renormalized over the selected set) so gradients reach the score head.
    Evaluation mode is a deterministic top-K with all-ones gates; ties go
    to the smallest index. Indices are returned sorted ascending.
    """
    keep = scores.keep
    s = keep.shape[0]
    if not 1 <= k <= s:
        raise ValueError(f"K must be in [1, {s}], got {k}")
    if training:
        gen = torch.Generator().manual_seed(rng_seed)
        u = torch.rand(s, generator=gen, dtype=keep.dtype)
        gumbel = -torch.log(-torch.log(u + _EPS) + _EPS)
        z = torch.log(keep + _EPS) + gumbel
    else:
        z = keep
    order = torch.argsort(-z.detach(), stable=True)
    idx = torch.sort(order[:k]).values
    if training:
        w = torch.softmax(z / temperature, dim=0)[idx]
        gates = k * w / w.sum()
    else:
        gates = torch.ones(k, dtype=keep.dtype)
    return SparsifySelection(indices=[int(i) for i in idx], gates=gates)
