import numpy as np
import pytest
import torch

from supertokenseg.attention import MLP


def make_identity_mlp(d, dtype=torch.float64):
    """MLP that is the identity on nonnegative inputs (ReLU passes through)."""
    mlp = MLP(d, d, dtype=dtype)
    with torch.no_grad():
        mlp.w1.copy_(torch.eye(d, dtype=dtype))
        mlp.b1.zero_()
        mlp.w2.copy_(torch.eye(d, dtype=dtype))
        mlp.b2.zero_()
    return mlp


def make_duplicating_head(d, dtype=torch.float64):
    """Exact channel-duplicating MLP d -> 2d, valid for any sign of input.

    Hidden layer computes relu([x, -x]); the output layer recombines
    relu(x) - relu(-x) = x into both output halves.
    """
    head = MLP(d, 2 * d, dtype=dtype)
    eye = torch.eye(d, dtype=dtype)
    with torch.no_grad():
        head.w1.copy_(torch.cat([eye, -eye], dim=1))
        head.b1.zero_()
        w2 = torch.zeros(2 * d, 2 * d, dtype=dtype)
        w2[:d, :d] = eye
        w2[:d, d:] = eye
        w2[d:, :d] = -eye
        w2[d:, d:] = -eye
        head.w2.copy_(w2)
        head.b2.zero_()
    return head


def make_zero_mlp(d_in, d_out, dtype=torch.float64):
    mlp = MLP(d_in, d_out, dtype=dtype)
    with torch.no_grad():
        for p in mlp.parameters():
            p.zero_()
    return mlp


def make_constant_mlp(d_in, values, dtype=torch.float64):
    """MLP whose output is a constant row regardless of input."""
    values = torch.as_tensor(values, dtype=dtype)
    mlp = make_zero_mlp(d_in, len(values), dtype=dtype)
    with torch.no_grad():
        mlp.b2.copy_(values)
    return mlp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
