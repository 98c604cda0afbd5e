"""Differentiable loss route, cross-checked against the float geometry."""

import numpy as np
import pytest

from grounder import autograd as ag
from grounder import boxes
from grounder.errors import ConfigError, ShapeError
from grounder.gradcheck import grad_check
from grounder.losses import LossConfig, giou, grounding_loss, iou, smooth_l1


def _box(*vals, rg=False):
    return ag.Tensor(np.asarray(vals, dtype=np.float64), requires_grad=rg)


def test_smooth_l1_zero_at_target():
    b = _box(0.4, 0.5, 0.2, 0.3)
    assert smooth_l1(b, b).item() == 0.0


def test_smooth_l1_quadratic_branch():
    # one coordinate off by 0.5: 0.5 * 0.25 / 4
    a = _box(0.5, 0.5, 0.5, 0.5)
    b = _box(1.0, 0.5, 0.5, 0.5)
    assert smooth_l1(a, b).item() == pytest.approx(0.03125, abs=1e-9)


def test_smooth_l1_linear_branch():
    a = _box(0.0, 0.5, 0.5, 0.5)
    b = _box(2.0, 0.5, 0.5, 0.5)
    assert smooth_l1(a, b).item() == pytest.approx(0.375, abs=1e-9)


def test_smooth_l1_beta_controls_transition():
    a = _box(0.0, 0.0, 0.0, 0.0)
    b = _box(0.5, 0.0, 0.0, 0.0)
    # |d| = 0.5 >= beta = 0.25: linear branch (0.5 - 0.125) / 4
    assert smooth_l1(a, b, beta=0.25).item() == pytest.approx(0.09375, abs=1e-9)


def test_differentiable_iou_giou_match_float_route():
    rng = np.random.default_rng(77)
    for _ in range(300):
        vals = np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.05, 0.4, 2)])
        wals = np.concatenate([rng.uniform(0.2, 0.8, 2), rng.uniform(0.05, 0.4, 2)])
        a, b = boxes.Box(*vals), boxes.Box(*wals)
        ti, tg = iou(_box(*vals), _box(*wals)), giou(_box(*vals), _box(*wals))
        assert ti.item() == pytest.approx(boxes.iou(a, b), abs=1e-9)
        assert tg.item() == pytest.approx(boxes.giou(a, b), abs=1e-9)


def test_grounding_loss_zero_iff_equal():
    b = _box(0.4, 0.6, 0.2, 0.1)
    assert grounding_loss(b, b).item() == pytest.approx(0.0, abs=1e-9)
    off = _box(0.41, 0.6, 0.2, 0.1)
    assert grounding_loss(off, b).item() > 0.0


def test_grounding_loss_lambda_zero_reduces_to_smooth_l1():
    a = _box(0.3, 0.4, 0.2, 0.3)
    b = _box(0.5, 0.5, 0.25, 0.2)
    cfg = LossConfig(giou_weight=0.0)
    assert grounding_loss(a, b, cfg).item() == pytest.approx(
        smooth_l1(a, b).item(), abs=1e-12)


def test_grounding_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    target = _box(0.52, 0.47, 0.22, 0.31)
    with ag.precision("float64"):
        for _ in range(5):
            pred = _box(*rng.uniform(0.2, 0.7, 4), rg=True)
            err = grad_check(lambda p: grounding_loss(p, target), [pred], eps=1e-6)
            assert err < 1e-4


def test_grounding_loss_decreases_toward_target():
    target = _box(0.5, 0.5, 0.3, 0.3)
    start = np.array([0.62, 0.41, 0.2, 0.42])
    goal = np.array([0.5, 0.5, 0.3, 0.3])
    last = np.inf
    for t in np.linspace(0.0, 1.0, 11):
        point = _box(*((1 - t) * start + t * goal))
        val = grounding_loss(point, target).item()
        assert val <= last + 1e-9
        last = val


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(giou_weight=-0.5)
    with pytest.raises(ConfigError):
        LossConfig(beta=0.0)


def test_loss_shape_contract():
    with pytest.raises(ShapeError):
        smooth_l1(ag.Tensor([1.0, 2.0]), ag.Tensor([1.0, 2.0]))


def test_grounding_loss_composes_terms():
    a = _box(0.3, 0.4, 0.2, 0.3)
    b = _box(0.6, 0.5, 0.25, 0.2)
    cfg = LossConfig(giou_weight=2.5)
    expect = smooth_l1(a, b).item() + 2.5 * (1.0 - giou(a, b).item())
    assert grounding_loss(a, b, cfg).item() == pytest.approx(expect, abs=1e-9)
