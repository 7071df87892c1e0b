import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from supertokenseg.errors import ConfigError, NumericError
from supertokenseg.geometry import Block, PointCloud
from supertokenseg.network import WNet, weighted_cross_entropy
from supertokenseg.training import (
    HISTORY_HEADER,
    HistoryRow,
    OptimizerState,
    TrainConfig,
    class_weights,
    cosine_lr,
    history_csv,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)

NAMES = ("low", "mid", "high")


def make_dataset(rng, n_blocks=3, n=24):
    """Blocks whose feature channel is separable by class (plus noise)."""
    blocks = []
    for _ in range(n_blocks):
        labels = rng.integers(0, 3, n)
        pos = rng.uniform(0, 1, (n, 3))
        pos[:, 2] = labels * 2.0 + rng.normal(0, 0.05, n)
        feat = (labels.astype(float) + rng.normal(0, 0.05, n)).reshape(-1, 1)
        cloud = PointCloud(pos, feat, labels, NAMES)
        blocks.append(Block(cloud=cloud, centroid=np.zeros(3),
                            source_indices=np.arange(n)))
    return blocks


def make_net(seed=0):
    return WNet(in_channels=1, n_classes=3, d1=4, n_supertokens=4,
                k_local=4, seed=seed)


def cfg(**kw):
    base = dict(lr0=0.05, momentum=0.9, weight_decay=1e-4, epochs=3,
                batch_size=4, rng_seed=0, assign_mode="soft", eval_every=2)
    base.update(kw)
    return TrainConfig(**base)


class TestCosineSchedule:
    def test_starts_at_lr0(self):
        assert cosine_lr(0, cfg(lr0=0.01, epochs=250)) == 0.01

    def test_halfway_is_half(self):
        assert math.isclose(cosine_lr(125, cfg(lr0=0.01, epochs=250)), 0.005)

    def test_epoch_100_of_250(self):
        got = cosine_lr(100, cfg(lr0=0.01, epochs=250))
        assert math.isclose(got, 0.0065450849718747376, rel_tol=1e-12)

    def test_monotone_decreasing(self):
        c = cfg(epochs=50)
        lrs = [cosine_lr(e, c) for e in range(50)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    def test_rejects_epoch_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(250, cfg(epochs=250))
        with pytest.raises(ValueError):
            cosine_lr(-1, cfg(epochs=250))


class ScalarModule(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.p = torch.nn.Parameter(torch.tensor(value, dtype=torch.float64))


class TestSgdStep:
    def test_two_step_unroll(self):
        # hand unroll for loss 0.5*p^2, lr=0.1, momentum=0.9, wd=0.1:
        # g1 = 1 + 0.1       = 1.1,   v1 = 1.1,   p = 1 - 0.11   = 0.89
        # g2 = 0.89 + 0.089  = 0.979, v2 = 1.969, p = 0.89-0.1969 = 0.6931
        mod = ScalarModule(1.0)
        state = OptimizerState(mod)
        c = cfg(momentum=0.9, weight_decay=0.1)
        for expected in (0.89, 0.6931):
            mod.zero_grad()
            (0.5 * mod.p ** 2).backward()
            sgd_step(mod, state, 0.1, c)
            assert math.isclose(float(mod.p.detach()), expected, rel_tol=1e-12)

    def test_zero_momentum_is_plain_descent(self):
        mod = ScalarModule(2.0)
        state = OptimizerState(mod)
        c = cfg(momentum=0.0, weight_decay=0.0)
        mod.zero_grad()
        (0.5 * mod.p ** 2).backward()
        sgd_step(mod, state, 0.25, c)
        assert math.isclose(float(mod.p.detach()), 1.5, rel_tol=1e-12)

    def test_clips_global_gradient_norm(self):
        mod = torch.nn.Module()
        mod.p = torch.nn.Parameter(torch.tensor([1.0, 1.0], dtype=torch.float64))
        mod.p.grad = torch.tensor([6.0, 8.0], dtype=torch.float64)  # norm 10
        state = OptimizerState(mod)
        c = cfg(momentum=0.0, weight_decay=0.0, clip_norm=5.0)
        sgd_step(mod, state, 1.0, c)  # clipped gradient is [3, 4]
        np.testing.assert_allclose(mod.p.detach().numpy(), [-2.0, -3.0], rtol=1e-12)

    def test_zero_clip_norm_disables_clipping(self):
        mod = torch.nn.Module()
        mod.p = torch.nn.Parameter(torch.tensor([1.0, 1.0], dtype=torch.float64))
        mod.p.grad = torch.tensor([6.0, 8.0], dtype=torch.float64)
        state = OptimizerState(mod)
        c = cfg(momentum=0.0, weight_decay=0.0, clip_norm=0.0)
        sgd_step(mod, state, 1.0, c)
        np.testing.assert_allclose(mod.p.detach().numpy(), [-5.0, -7.0], rtol=1e-12)

    def test_nonfinite_gradient_names_parameter(self):
        mod = ScalarModule(1.0)
        state = OptimizerState(mod)
        mod.p.grad = torch.tensor(float("nan"), dtype=torch.float64)
        with pytest.raises(NumericError, match="'p'"):
            sgd_step(mod, state, 0.1, cfg())


class TestClassWeights:
    def test_hand_computed_six_classes(self):
        labels = np.repeat(np.arange(6), [50, 20, 10, 10, 5, 5])
        w = class_weights(labels, 6).numpy()
        np.testing.assert_allclose(
            w, np.array([12, 30, 60, 60, 120, 120]) / 67, rtol=1e-12
        )
        assert math.isclose(w.mean(), 1.0, rel_tol=1e-12)

    def test_absent_class_gets_max_present_weight(self):
        w = class_weights([0, 0, 0, 1], 3).numpy()
        np.testing.assert_allclose(w, [3 / 7, 9 / 7, 9 / 7], rtol=1e-12)

    def test_30_to_1_imbalance_ratio(self):
        labels = np.repeat([0, 1], [30, 1])
        w = class_weights(labels, 2).numpy()
        assert math.isclose(w[1] / w[0], 30.0, rel_tol=1e-12)

    def test_balanced_labels_give_unit_weights(self):
        w = class_weights([0, 1, 2, 0, 1, 2], 3).numpy()
        np.testing.assert_allclose(w, [1, 1, 1], rtol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            class_weights([], 3)


class TestWeightedCrossEntropy:
    def test_unit_weights_match_reference(self, rng):
        logits = torch.tensor(rng.standard_normal((20, 5)))
        labels = torch.tensor(rng.integers(0, 5, 20))
        got = weighted_cross_entropy(logits, labels, torch.ones(5, dtype=torch.float64))
        ref = F.cross_entropy(logits, labels)
        assert math.isclose(float(got), float(ref), rel_tol=1e-12)


class TestHistoryCsv:
    def test_blank_eval_fields(self):
        rows = [
            HistoryRow(epoch=0, lr=0.01, train_loss=1.5),
            HistoryRow(epoch=1, lr=0.005, train_loss=1.0,
                       eval_oa=0.9, eval_miou=0.8, eval_avg_f1=0.85),
        ]
        text = history_csv(rows)
        lines = text.strip().split("\n")
        assert lines[0] == HISTORY_HEADER
        assert lines[1].endswith(",,")
        assert lines[2].endswith("0.900000,0.800000,0.850000")


class TestTrainLoop:
    def test_rejects_zero_epochs(self, rng):
        with pytest.raises(ValueError):
            train(make_dataset(rng), cfg(epochs=0), make_net())

    def test_rejects_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], cfg(), make_net())

    def test_bit_identical_repeat_runs(self, rng):
        ds = make_dataset(rng)
        results = []
        nets = []
        for _ in range(2):
            net = make_net(seed=11)
            results.append(train(ds, cfg(epochs=3, rng_seed=5), net))
            nets.append(net)
        assert history_csv(results[0].history) == history_csv(results[1].history)
        for a, b in zip(nets[0].state_dict().values(), nets[1].state_dict().values()):
            assert torch.equal(a, b)

    def test_loss_decreases_on_separable_data(self, rng):
        ds = make_dataset(rng, n_blocks=4, n=32)
        net = WNet(in_channels=1, n_classes=3, d1=8, n_supertokens=4,
                   k_local=4, seed=1)
        result = train(ds, cfg(epochs=40, eval_every=40), net)
        assert result.history[-1].train_loss < 0.7 * result.history[0].train_loss
        assert result.best_miou > 0.8

    def test_eval_rows_populated_on_schedule(self, rng):
        ds = make_dataset(rng)
        result = train(ds, cfg(epochs=4, eval_every=2), make_net())
        has_eval = [r.eval_oa is not None for r in result.history]
        assert has_eval == [False, True, False, True]

    def test_supertokens_move_during_training(self, rng):
        ds = make_dataset(rng)
        net = make_net(seed=2)
        before = net.module1.initial_supertokens.detach().clone()
        train(ds, cfg(epochs=1, assign_mode="soft"), net)
        assert not torch.equal(net.module1.initial_supertokens.detach(), before)


class TestResume:
    def test_checkpoint_resume_reproduces_run(self, rng, tmp_path):
        ds = make_dataset(rng)
        c = cfg(epochs=4, eval_every=4, rng_seed=3)

        net_a = make_net(seed=7)
        full = train(ds, c, net_a)

        net_b = make_net(seed=7)
        state_b = OptimizerState(net_b)
        part1 = train(ds, c, net_b, stop_epoch=2, state=state_b)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, net_b, "digest", epoch=2, state=state_b)

        net_c = make_net(seed=99)  # different init, overwritten by the load
        payload = load_checkpoint(path, net_c, "digest")
        state_c = OptimizerState(net_c)
        for name, v in payload["velocity"].items():
            state_c.velocity[name].copy_(v)
        part2 = train(ds, c, net_c, start_epoch=payload["epoch"], state=state_c)

        joined = history_csv(part1.history + part2.history)
        assert joined == history_csv(full.history)
        for a, b in zip(net_a.state_dict().values(), net_c.state_dict().values()):
            assert torch.equal(a, b)

    def test_rejects_digest_mismatch(self, tmp_path):
        net = make_net()
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, net, "aaaa", epoch=0)
        with pytest.raises(ConfigError, match="digest"):
            load_checkpoint(path, make_net(), "bbbb")

    def test_rejects_shape_mismatch(self, tmp_path):
        net = make_net()
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, net, "aaaa", epoch=0)
        other = WNet(in_channels=1, n_classes=3, d1=8, n_supertokens=4,
                     k_local=4, seed=0)
        with pytest.raises(ConfigError, match="shape"):
            load_checkpoint(path, other, "aaaa")

    def test_rejects_bad_stop_epoch(self, rng):
        with pytest.raises(ValueError):
            train(make_dataset(rng), cfg(epochs=4), make_net(), stop_epoch=9)
