"""Numeric self-checks: analytic gradients against central finite
differences, plus oracle equivalences for the assignment and loss paths.

Everything runs in double precision on tiny instances. `run_selfcheck`
returns one result per check so the CLI can report the worst offender.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import attention as att
from . import network as net_mod
from .network import WNet, wnet_loss
from .training import TrainConfig, cosine_lr

FD_STEP = 1e-5
REL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def _rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    diff = (analytic - numeric).abs()
    denom = torch.maximum(
        torch.maximum(analytic.abs(), numeric.abs()),
        torch.tensor(1e-6, dtype=analytic.dtype),
    )
    rel = diff / denom
    rel[diff < 1e-9] = 0.0
    return float(rel.max()) if rel.numel() else 0.0


def gradient_check(loss_fn, tensors: dict[str, torch.Tensor],
                   step: float = FD_STEP) -> float:
    """Max relative error between autograd and central differences over all
    elements of `tensors`. Tensors must be float64 leaves with requires_grad."""
    for t in tensors.values():
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    with torch.no_grad():
        for t in tensors.values():
            analytic = t.grad if t.grad is not None else torch.zeros_like(t)
            numeric = torch.zeros_like(t)
            flat = t.view(-1)
            nflat = numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
            worst = max(worst, _rel_error(analytic, numeric))
    return worst


def _leaf(gen, *shape):
    return torch.randn(*shape, dtype=torch.float64, generator=gen).requires_grad_()


def _named_params(module):
    return {name: p for name, p in module.named_parameters()}


def check_dfe_gradients(seed=0) -> float:
    gen = torch.Generator().manual_seed(seed)
    s = _leaf(gen, 5, 4)
    w = att.QKVWeights(4, dtype=torch.float64, generator=gen)
    tensors = {"input": s, **_named_params(w)}
    return gradient_check(lambda: att.dfe_enhance(s, w).sum(), tensors)


def check_cau_gradients(seed=0) -> float:
    gen = torch.Generator().manual_seed(seed)
    tokens = _leaf(gen, 6, 4)
    enhanced = _leaf(gen, 3, 4)
    head = att.MLP(4, 8, dtype=torch.float64, generator=gen)
    cam_q = torch.randn(3, 4, dtype=torch.float64, generator=gen)
    cam = att.soft_assign(cam_q, tokens.detach())
    tensors = {"tokens": tokens, "enhanced": enhanced, **_named_params(head)}
    return gradient_check(
        lambda: att.cau_reconstruct(tokens, cam, enhanced, head).sum(), tensors
    )


def check_soft_dso_gradients(seed=0) -> float:
    """soft assign -> cluster-mean update, differentiated end to end."""
    gen = torch.Generator().manual_seed(seed)
    tokens = _leaf(gen, 6, 4)
    supertokens = _leaf(gen, 3, 4)
    w = att.QKVWeights(4, dtype=torch.float64, generator=gen)

    def loss():
        q, k, v = att.project_qkv(tokens, supertokens, w)
        cam = att.soft_assign(q, k)
        return att.supertoken_update(cam, v, supertokens).sum()

    tensors = {"tokens": tokens, "supertokens": supertokens, **_named_params(w)}
    return gradient_check(loss, tensors)


def check_decision_score_gradients(seed=0) -> float:
    gen = torch.Generator().manual_seed(seed)
    glocal = _leaf(gen, 5, 6)
    mlp = att.MLP(6, 2, dtype=torch.float64, generator=gen)
    tensors = {"glocal": glocal, **_named_params(mlp)}
    # sum of keep-probabilities: a nontrivial scalar through the softmax
    return gradient_check(
        lambda: att.decision_scores(glocal, mlp).matrix[:, 0].sum(), tensors
    )


def _tiny_instance(seed=0, n=16, s=4, d1=4, c_cls=3):
    gen = torch.Generator().manual_seed(seed)
    net = WNet(in_channels=2, n_classes=c_cls, d1=d1, n_supertokens=s,
               k_local=4, dtype=torch.float64, seed=seed)
    pos = torch.rand(n, 3, dtype=torch.float64, generator=gen)
    feat = torch.randn(n, 2, dtype=torch.float64, generator=gen)
    labels = torch.randint(0, c_cls, (n,), generator=gen)
    weights = torch.full((c_cls,), 1.0, dtype=torch.float64)
    return net, pos, feat, labels, weights


def check_wnet_gradients(assign_mode="soft", seed=0) -> float:
    """End-to-end loss gradients on an N=16, S=4, D1=4, C_cls=3 instance.

    In hard mode the assignment is constant in backward, so only parameters
    on differentiable paths are checked (the finite-difference perturbation
    cannot flip an assignment at this scale, making FD valid there too).
    """
    net, pos, feat, labels, weights = _tiny_instance(seed)

    def loss():
        pred = net(pos, feat, assign_mode, training=True, rng_seed=seed)
        return wnet_loss(pred, labels, weights)

    params = _named_params(net)
    if assign_mode == "hard":
        # initial supertokens feed the (detached) assignment and the
        # empty-cluster fallback; skip them in hard mode
        params = {k: v for k, v in params.items()
                  if "initial_supertokens" not in k and ".dso.w_q" not in k
                  and ".dso.w_k" not in k}
    return gradient_check(loss, params)


def check_hard_assignment_oracle(n_trials=50, seed=0) -> float:
    """Hard columns one-hot and cluster means equal a brute-force group-by."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        s, n, d = rng.integers(1, 8), rng.integers(1, 30), rng.integers(1, 6)
        q = torch.tensor(rng.standard_normal((s, d)))
        k = torch.tensor(rng.standard_normal((n, d)))
        v = torch.tensor(rng.standard_normal((n, d)))
        fb = torch.tensor(rng.standard_normal((s, d)))
        cam = att.hard_assign(q, k)
        m = cam.matrix.numpy()
        if not np.array_equal(m.sum(axis=0), np.ones(n)):
            return float("inf")
        got = att.supertoken_update(cam, v, fb).numpy()
        scores = (q.numpy() @ k.numpy().T) / np.sqrt(d)
        assign = scores.argmax(axis=0)
        expect = fb.numpy().copy()
        for i in range(s):
            members = np.flatnonzero(assign == i)
            if len(members):
                expect[i] = v.numpy()[members].mean(axis=0)
        worst = max(worst, float(np.abs(got - expect).max()))
    return worst


def check_weighted_ce_reduction(seed=0) -> float:
    """Unit class weights reduce weighted CE to plain CE."""
    gen = torch.Generator().manual_seed(seed)
    logits = torch.randn(10, 4, dtype=torch.float64, generator=gen)
    labels = torch.randint(0, 4, (10,), generator=gen)
    ours = net_mod.weighted_cross_entropy(
        logits, labels, torch.ones(4, dtype=torch.float64)
    )
    ref = torch.nn.functional.cross_entropy(logits, labels)
    return float((ours - ref).abs())


def check_cosine_formula() -> float:
    cfg = TrainConfig(lr0=0.01, epochs=250)
    expected = 0.01 * (1 + np.cos(np.pi * 100 / 250)) / 2
    return abs(cosine_lr(100, cfg) - expected)


def run_selfcheck() -> list[CheckResult]:
    checks = [
        ("dfe_enhance", check_dfe_gradients(), REL_TOL),
        ("cau_reconstruct", check_cau_gradients(), REL_TOL),
        ("soft_dso", check_soft_dso_gradients(), REL_TOL),
        ("decision_scores", check_decision_score_gradients(), REL_TOL),
        ("wnet_loss_soft", check_wnet_gradients("soft"), REL_TOL),
        ("wnet_loss_hard", check_wnet_gradients("hard"), REL_TOL),
        ("hard_assignment_oracle", check_hard_assignment_oracle(), 1e-12),
        ("weighted_ce_reduction", check_weighted_ce_reduction(), 1e-12),
        ("cosine_lr_formula", check_cosine_formula(), 1e-15),
    ]
    return [
        CheckResult(name=name, max_rel_error=err, passed=err < tol)
        for name, err, tol in checks
    ]
