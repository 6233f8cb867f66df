import math

import numpy as np
import pytest

from humanvol.autodiff import ShapeError, Tensor, check_gradients
from humanvol.losses import (
    EPS,
    LossWeights,
    NonFiniteLoss,
    loss_combined,
    loss_normal,
    loss_silhouette,
    loss_volume,
)

SEEDS = range(10)


def plain_bce(p, t):
    p = np.clip(p, EPS, 1 - EPS)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))


class TestVolume:
    def test_hand_value(self):
        assert loss_volume(Tensor(np.full((4, 4, 4), 0.5)), np.ones((4, 4, 4)), 0.7).item() == pytest.approx(
            0.7 * math.log(2), abs=1e-12
        )
        assert 0.7 * math.log(2) == pytest.approx(0.48520, abs=1e-5)

    def test_perfect_prediction_floor(self):
        t = (np.random.default_rng(0).uniform(size=(5, 5, 5)) > 0.5).astype(float)
        l = loss_volume(Tensor(np.clip(t, EPS, 1 - EPS)), t).item()
        assert 0 <= l <= -math.log(1 - EPS) + 1e-15

    @pytest.mark.parametrize("seed", range(5))
    def test_gamma_half_is_half_bce(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.uniform(size=(3, 4, 5)), (rng.uniform(size=(3, 4, 5)) > 0.6).astype(float)
        assert loss_volume(Tensor(p), t, 0.5).item() == pytest.approx(0.5 * plain_bce(p, t), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            loss_volume(Tensor(np.full((2, 2), 0.5)), np.ones((2, 3)))

    def test_false_negative_weighted_more(self):
        t = np.array([1.0, 0.0])
        p = Tensor(np.array([0.3, 0.7]), requires_grad=True)
        loss_volume(p, t, 0.7).backward()
        # raising the missed positive helps more than lowering the false positive by the same amount
        assert -p.grad[0] > p.grad[1] > 0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        p = Tensor(rng.uniform(0.05, 0.95, (3, 4, 2)), requires_grad=True)
        t = (rng.uniform(size=(3, 4, 2)) > 0.5).astype(float)
        assert check_gradients(lambda: loss_volume(p, t), [p])[0] < 1e-4


class TestSilhouette:
    def test_hand_value(self):
        assert loss_silhouette(Tensor(np.full((6, 4), 0.5)), np.zeros((6, 4))).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_floor(self):
        t = np.eye(4)
        assert loss_silhouette(Tensor(np.clip(t, EPS, 1 - EPS)), t).item() <= -math.log(1 - EPS) + 1e-15

    def test_single_voxel_monotone(self):
        from humanvol.layers import project_silhouette
        target = np.zeros((3, 2))
        target[1, 0] = 1
        losses = []
        for occ in (0.1, 0.4, 0.8, 0.99):
            v = np.full((2, 3, 4), 1e-3)
            v[0, 1, 2] = occ
            losses.append(loss_silhouette(project_silhouette(Tensor(v), "front"), target).item())
        assert all(b < a for a, b in zip(losses, losses[1:]))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        p = Tensor(rng.uniform(0.05, 0.95, (5, 3)), requires_grad=True)
        t = (rng.uniform(size=(5, 3)) > 0.5).astype(float)
        assert check_gradients(lambda: loss_silhouette(p, t), [p])[0] < 1e-4


def _unit(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=0, keepdims=True)


class TestNormal:
    def test_identical(self):
        n = _unit(np.random.default_rng(0), (3, 4, 5))
        assert loss_normal(Tensor(n), n).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_and_opposite(self):
        a = np.zeros((3, 2, 2)); a[0] = 1
        b = np.zeros((3, 2, 2)); b[1] = 1
        assert loss_normal(Tensor(a), b).item() == pytest.approx(1.0)
        assert loss_normal(Tensor(a), -a).item() == pytest.approx(2.0)

    def test_zero_pixels_excluded(self):
        a = np.zeros((3, 2, 2)); a[2] = -1
        b = a.copy()
        b[:, 0, 0] = 0  # background in ground truth
        a[:, 1, 1] = [1, 0, 0]
        b[:, 1, 1] = [0, 1, 0]
        assert loss_normal(Tensor(a), b).item() == pytest.approx(1.0 / 3.0)

    def test_all_excluded_warns(self):
        with pytest.warns(RuntimeWarning):
            assert loss_normal(Tensor(np.ones((3, 2, 2))), np.zeros((3, 2, 2))).item() == 0.0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        p = Tensor(rng.standard_normal((3, 4, 4)), requires_grad=True)
        t = _unit(rng, (3, 4, 4))
        t[:, 0, :] = 0
        assert check_gradients(lambda: loss_normal(p, t), [p])[0] < 1e-4

    def test_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            l = loss_normal(Tensor(rng.standard_normal((3, 5, 5))), _unit(rng, (3, 5, 5))).item()
            assert 0 <= l <= 2


class TestCombined:
    def test_values(self):
        assert loss_combined(0.0, 0.0, 0.0, 0.0).item() == 0.0
        assert loss_combined(1.0, 1.0, 1.0, 1.0, LossWeights()).item() == pytest.approx(1.21, abs=1e-12)

    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_fs, w.lambda_ss, w.lambda_n, w.gamma) == (0.1, 0.1, 0.01, 0.7)

    def test_non_finite_named(self):
        with pytest.raises(NonFiniteLoss, match="L_SS"):
            loss_combined(1.0, 1.0, float("nan"), 1.0)

    def test_lambda_n_zero_gates_gradient(self):
        x = Tensor(np.array([0.3]), requires_grad=True)
        ln = (x * x).sum()
        loss_combined(Tensor(np.array(1.0)), 0.0, 0.0, ln, LossWeights(lambda_n=0.0)).backward()
        assert x.grad[0] == 0.0
