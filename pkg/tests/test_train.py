"""Loss and optimizer: branch arithmetic, AdamW behavior, training loop."""

import dataclasses

import numpy as np
import pytest

from crowdformer.config import OptimConfig
from crowdformer.model import CrowdFormer
from crowdformer.tensor import Tensor
from crowdformer.train import AdamW, MissingGradientError, smooth_l1, train_epoch


def loss_value(x, y, beta):
    return smooth_l1(Tensor([float(x)]), [float(y)], beta).item()


def loss_grad(x, y, beta):
    p = Tensor([float(x)], requires_grad=True)
    smooth_l1(p, [float(y)], beta).backward()
    return p.grad[0]


class TestSmoothL1:
    def test_zero_at_equality(self):
        assert loss_value(5.0, 5.0, 1.0) == 0.0

    def test_branch_joint_continuity(self):
        # both branches give 0.5*beta at |x-y| = beta
        assert loss_value(9.0, 2.0, 7.0) == pytest.approx(3.5, abs=1e-15)
        quad = 0.5 * 7.0**2 / 7.0
        lin = 7.0 - 0.5 * 7.0
        assert quad == lin == 3.5

    def test_linear_branch(self):
        assert loss_value(10.0, 2.0, 1.0) == pytest.approx(7.5)

    def test_quadratic_branch(self):
        assert loss_value(2.5, 2.0, 1.0) == pytest.approx(0.125)

    def test_value_and_derivative_continuous_at_joint(self):
        beta = 1.0
        eps = 1e-9
        below = loss_value(beta - eps, 0.0, beta)
        above = loss_value(beta + eps, 0.0, beta)
        assert abs(below - above) < 1e-8
        assert abs(below - 0.5 * beta) < 2e-9
        g_below = loss_grad(beta - eps, 0.0, beta)
        g_above = loss_grad(beta + eps, 0.0, beta)
        assert abs(g_below - g_above) < 1e-8
        assert abs(g_below - 1.0) < 2e-9

    def test_bounded_by_absolute_error(self, rng):
        for _ in range(200):
            x = rng.uniform(-20, 20)
            y = rng.uniform(-20, 20)
            beta = rng.uniform(0.01, 10)
            assert loss_value(x, y, beta) <= abs(x - y) + 1e-12

    def test_derivative_matches_finite_differences(self, rng):
        beta = 2.0
        for _ in range(50):
            x = rng.uniform(-10, 10)
            if abs(abs(x) - beta) < 1e-3:  # keep clear of the joint
                continue
            h = 1e-6
            fd = (loss_value(x + h, 0.0, beta) - loss_value(x - h, 0.0, beta)) / (2 * h)
            assert abs(loss_grad(x, 0.0, beta) - fd) < 1e-6

    def test_vector_inputs_average(self):
        pred = Tensor([1.0, 5.0])
        value = smooth_l1(pred, [0.0, 0.0], 1.0).item()
        assert value == pytest.approx((0.5 + 4.5) / 2)

    def test_nonpositive_beta_rejected(self):
        with pytest.raises(ValueError, match="beta must be positive"):
            smooth_l1(Tensor([1.0]), [0.0], 0.0)


def make_params(values):
    return {f"p{i}": Tensor(np.array(v, dtype=np.float64), requires_grad=True) for i, v in enumerate(values)}


def optim_cfg(**kw):
    base = dict(learning_rate=0.1, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8, batch_size=1, epochs=1, seed=0)
    base.update(kw)
    return OptimConfig(**base)


class TestAdamW:
    def test_zero_gradient_no_decay_keeps_params(self):
        params = make_params([[1.0, -2.0]])
        opt = AdamW(params, optim_cfg())
        for p in params.values():
            p.grad = np.zeros_like(p.data)
        opt.step()
        np.testing.assert_array_equal(params["p0"].data, [1.0, -2.0])

    def test_single_step_hand_evaluated(self):
        # p=1, g=1, lr=0.1: bias-corrected update is lr * 1/(1 + eps) ~ 0.1
        params = make_params([[1.0]])
        opt = AdamW(params, optim_cfg())
        params["p0"].grad = np.array([1.0])
        opt.step()
        assert params["p0"].data[0] == pytest.approx(0.9, abs=1e-7)

    def test_decoupled_decay_alone(self):
        params = make_params([[4.0]])
        opt = AdamW(params, optim_cfg(weight_decay=0.1))
        params["p0"].grad = np.array([0.0])
        opt.step()
        # moment update is zero; only lr*wd*p = 0.01*4 is removed
        assert params["p0"].data[0] == pytest.approx(4.0 * (1 - 0.1 * 0.1))

    def test_missing_gradient_raises(self):
        params = make_params([[1.0], [2.0]])
        opt = AdamW(params, optim_cfg())
        params["p0"].grad = np.array([1.0])
        with pytest.raises(MissingGradientError, match="p1"):
            opt.step()

    def test_matches_hand_rolled_adam_when_decay_zero(self, rng):
        # Independent Adam oracle on a quadratic bowl: grad = p.
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        p_opt = make_params([rng.standard_normal(4)])
        reference = p_opt["p0"].data.copy()
        opt = AdamW(p_opt, optim_cfg(learning_rate=lr))
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 51):
            grad = reference.copy()
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            reference = reference - lr * mhat / (np.sqrt(vhat) + eps)

            p_opt["p0"].grad = p_opt["p0"].data.copy()
            opt.step()
        np.testing.assert_allclose(p_opt["p0"].data, reference, atol=1e-12)

    def test_step_decreases_quadratic_loss(self, rng):
        w = Tensor(rng.standard_normal(3), requires_grad=True)
        x = rng.standard_normal((10, 3))
        y = x @ np.array([1.0, -2.0, 0.5])

        def loss():
            pred = Tensor(x) @ w.reshape((3, 1))
            err = pred.reshape((10,)) - Tensor(y)
            return (err * err).mean()

        opt = AdamW({"w": w}, optim_cfg(learning_rate=1e-3))
        before = loss()
        opt.zero_grad()
        before.backward()
        opt.step()
        assert loss().item() < before.item()


class FakeTrainSet:
    """Six fixed crops per image; stands in for the disk-backed training set."""

    def __init__(self, cfg, n_images=3, seed=0):
        gen = np.random.default_rng(seed)
        size = cfg.input_size
        self.items = []
        for _ in range(n_images):
            crops = gen.standard_normal((6, 3, size, size)) * 0.5
            counts = gen.integers(0, 10, size=6).astype(np.float64)
            self.items.append((crops, counts))

    def __len__(self):
        return len(self.items)

    def batch(self, idx, rng):
        crops, counts = self.items[idx]
        return crops.copy(), counts.copy(), float(counts.sum())


class TestTrainEpoch:
    def test_frozen_model_constant_loss(self, mini_model_cfg, tiny_cfg):
        model = CrowdFormer(mini_model_cfg, np.random.default_rng(0))
        train_set = FakeTrainSet(mini_model_cfg)
        frozen = AdamW({}, tiny_cfg.optim)  # no parameters registered: nothing moves
        rng = np.random.default_rng(1)
        losses = [train_epoch(model, train_set, tiny_cfg.loss, frozen, rng) for _ in range(3)]
        assert losses[0] == losses[1] == losses[2]

    def test_same_seed_identical_curves(self, mini_model_cfg, tiny_cfg):
        curves = []
        for _ in range(2):
            model = CrowdFormer(mini_model_cfg, np.random.default_rng(0))
            opt = AdamW(model.named_params(), tiny_cfg.optim)
            rng = np.random.default_rng(123)
            train_set = FakeTrainSet(mini_model_cfg)
            curves.append([train_epoch(model, train_set, tiny_cfg.loss, opt, rng) for _ in range(3)])
        assert curves[0] == curves[1]

    def test_image_granularity_uses_total(self, mini_model_cfg, tiny_cfg):
        model = CrowdFormer(mini_model_cfg, np.random.default_rng(0))
        loss_cfg = dataclasses.replace(tiny_cfg.loss, granularity="image")
        opt = AdamW(model.named_params(), tiny_cfg.optim)
        value = train_epoch(model, FakeTrainSet(mini_model_cfg), loss_cfg, opt, np.random.default_rng(1))
        assert np.isfinite(value)

    def test_empty_dataset_rejected(self, mini_model_cfg, tiny_cfg):
        model = CrowdFormer(mini_model_cfg, np.random.default_rng(0))
        opt = AdamW(model.named_params(), tiny_cfg.optim)
        empty = FakeTrainSet(mini_model_cfg, n_images=0)
        with pytest.raises(ValueError, match="empty dataset"):
            train_epoch(model, empty, tiny_cfg.loss, opt, np.random.default_rng(1))
