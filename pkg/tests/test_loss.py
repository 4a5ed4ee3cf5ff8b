import math

import numpy as np
import pytest

from conftest import numeric_grad
from voxpipe.domain.config import HybridFocalParams
from voxpipe.domain.errors import ShapeMismatch
from voxpipe.engine.tensor import Tensor
from voxpipe.training.loss import (
    baseline_loss,
    bce,
    d_loss,
    dice_loss,
    focal_loss,
    focal_tversky_loss,
    g_adv,
    g_total,
    hybrid_focal,
    tversky_index,
)

P = np.array([0.8])
Y = np.array([1.0])


def test_dice_loss_cases():
    y = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=np.float64)
    assert dice_loss(np.full(8, 0.5), y).item() == pytest.approx(0.5, abs=1e-6)
    assert dice_loss(y, y).item() == pytest.approx(0.0, abs=1e-6)
    assert dice_loss(1.0 - y, y).item() == pytest.approx(1.0, abs=1e-6)


def test_focal_single_voxel():
    expected = 0.6 * 0.2**2 * -math.log(0.8)
    assert focal_loss(P, Y, delta=0.6, gamma=1.0).item() == pytest.approx(expected, abs=1e-9)
    assert expected == pytest.approx(5.355e-3, abs=1e-6)


def test_focal_reduces_to_half_bce():
    p = np.array([0.3, 0.9, 0.6])
    y = np.array([1.0, 1.0, 0.0])
    assert focal_loss(p, y, delta=0.5, gamma=0.0).item() == pytest.approx(0.5 * bce(p, y).item(), rel=1e-9)


def test_focal_tversky_single_voxel():
    assert tversky_index(P, Y, delta=0.6).item() == pytest.approx(0.8 / 0.92, abs=1e-6)
    assert focal_tversky_loss(P, Y, delta=0.6, gamma=0.75).item() == pytest.approx(0.217086, abs=1e-6)


def test_focal_tversky_is_zero_for_perfect_prediction():
    y = np.array([0.0, 1.0, 1.0])
    assert focal_tversky_loss(y, y, delta=0.6, gamma=0.75).item() < 1e-6


def test_hybrid_focal_single_voxel():
    params = HybridFocalParams(lam=0.5, delta=0.6, gamma=0.75, focal_gamma=1.0)
    assert hybrid_focal(P, Y, params).item() == pytest.approx(0.1112207, abs=1e-6)


@pytest.mark.parametrize("lam", [0.0, 1.0])
def test_hybrid_focal_endpoints(lam):
    params = HybridFocalParams(lam=lam, delta=0.6, gamma=0.75)
    p = np.array([0.2, 0.7, 0.9])
    y = np.array([0.0, 1.0, 1.0])
    only = focal_loss(p, y, 0.6, 0.75) if lam == 1.0 else focal_tversky_loss(p, y, 0.6, 0.75)
    assert hybrid_focal(p, y, params).item() == pytest.approx(only.item(), rel=1e-9)


def test_bce_values():
    assert bce(np.array([0.5]), Y).item() == pytest.approx(math.log(2.0), abs=1e-9)
    assert bce(np.array([0.9]), Y).item() == pytest.approx(0.10536, abs=1e-5)


def test_bce_is_finite_at_saturation():
    assert np.isfinite(bce(np.array([0.0, 1.0]), np.array([1.0, 0.0])).item())


def test_adversarial_losses():
    ones, zeros, half = (Tensor(np.full((1, 1, 2, 1, 1), v)) for v in (1.0, 0.0, 0.5))
    assert d_loss(ones, zeros).item() == 0.0
    assert d_loss(half, half).item() == pytest.approx(0.5)
    assert g_adv(ones).item() == 0.0
    with pytest.raises(ShapeMismatch):
        d_loss(ones, Tensor(np.zeros((1, 1, 3, 1, 1))))


def test_g_total_weights_hybrid_term():
    p = np.array([0.3, 0.8])
    y = np.array([0.0, 1.0])
    d_fake = Tensor(np.ones((1, 1, 1, 1, 1)))
    h = hybrid_focal(p, y).item()
    assert g_total(d_fake, p, y, weight=5.0).item() == pytest.approx(5.0 * h)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice_loss(np.zeros(3), np.zeros(4))


def test_baseline_loss_kinds():
    p, y = np.array([0.4, 0.6]), np.array([0.0, 1.0])
    assert baseline_loss("dice", p, y).item() == pytest.approx(dice_loss(p, y).item())
    assert baseline_loss("hybrid", p, y).item() == pytest.approx(hybrid_focal(p, y).item())
    with pytest.raises(ValueError):
        baseline_loss("l1", p, y)


def test_hybrid_focal_gradient():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(2, 3, 2))
    y = (rng.random(size=p.shape) > 0.5).astype(np.float64)
    params = HybridFocalParams(lam=0.5, delta=0.6, gamma=0.75)
    pt = Tensor(p, requires_grad=True)
    hybrid_focal(pt, y, params).backward()
    np.testing.assert_allclose(pt.grad, numeric_grad(lambda: hybrid_focal(p, y, params).item(), p), rtol=1e-5, atol=1e-8)


def test_dice_loss_ignores_joint_permutation():
    rng = np.random.default_rng(3)
    p = rng.random(40)
    y = (rng.random(40) > 0.6).astype(np.float64)
    perm = rng.permutation(40)
    assert dice_loss(p[perm], y[perm]).item() == pytest.approx(dice_loss(p, y).item(), rel=1e-12)


def test_hybrid_focal_is_linear_in_lambda():
    p = np.array([0.2, 0.7, 0.9, 0.4])
    y = np.array([0.0, 1.0, 1.0, 1.0])
    at = {lam: hybrid_focal(p, y, HybridFocalParams(lam=lam, delta=0.6, gamma=0.75)).item() for lam in (0.0, 0.3, 1.0)}
    assert at[0.3] == pytest.approx(0.7 * at[0.0] + 0.3 * at[1.0], rel=1e-9)
