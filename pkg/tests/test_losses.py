"""Loss functions: stable cross-entropy, focal, reweighting, analytic gradients."""

import numpy as np
import pytest

from sgdebias.core import ConfigError
from sgdebias.losses import (
    ce_and_grad,
    cross_entropy,
    focal_and_grad,
    log_softmax,
    predicate_loss_and_grad,
    softmax,
)

from oracles import fd_gradient, oracle_cross_entropy, oracle_focal


# --- cross entropy anchors -----------------------------------------------------

def test_ce_uniform_two_way():
    assert abs(cross_entropy(np.array([0.0, 0.0]), 0) - np.log(2.0)) < 1e-15


def test_ce_stable_under_large_logits():
    v = cross_entropy(np.array([1000.0, 0.0]), 0)
    assert np.isfinite(v)
    assert v < 1e-300


def test_ce_three_way_anchor():
    expect = np.log(1.0 + np.exp(-1.0) + np.exp(-2.0))
    assert abs(cross_entropy(np.array([1.0, 2.0, 3.0]), 2) - expect) < 1e-12
    assert abs(expect - 0.40760596444438) < 1e-12


def test_ce_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        logits = rng.normal(0.0, 3.0, int(rng.integers(2, 8)))
        t = int(rng.integers(0, len(logits)))
        assert abs(cross_entropy(logits, t) - oracle_cross_entropy(logits, t)) < 1e-12


def test_log_softmax_normalized():
    rng = np.random.default_rng(1)
    ls = log_softmax(rng.normal(0.0, 5.0, (20, 6)))
    np.testing.assert_allclose(np.exp(ls).sum(axis=1), np.ones(20), atol=1e-12)
    np.testing.assert_allclose(softmax(rng.normal(size=(4, 3))).sum(axis=1),
                               np.ones(4), atol=1e-12)


# --- focal --------------------------------------------------------------------

def test_focal_reduces_to_ce():
    rng = np.random.default_rng(2)
    logits = rng.normal(0.0, 4.0, (10000, 7))
    targets = rng.integers(0, 7, 10000)
    fvals, _fg = focal_and_grad(logits, targets, gamma=0.0, alpha=1.0)
    cvals, _cg = ce_and_grad(logits, targets)
    assert np.max(np.abs(fvals - cvals)) < 1e-12


def test_focal_vanishes_at_confident_prediction():
    # p_t = 1 - 1e-9 at logits (L, 0, 0) with L = ln(2e9)
    L = np.log(2e9)
    vals, _g = focal_and_grad(np.array([[L, 0.0, 0.0]]), np.array([0]),
                              gamma=2.0, alpha=0.25)
    assert vals[0] < 1e-15


def test_focal_quarter_anchor():
    vals, _g = focal_and_grad(np.zeros((1, 4)), np.array([0]), gamma=2.0, alpha=0.25)
    expect = 0.25 * 0.5625 * np.log(4.0)
    assert abs(vals[0] - expect) < 1e-9
    assert abs(oracle_focal(np.zeros(4), 0, 2.0, 0.25) - expect) < 1e-12


def test_focal_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(40):
        logits = rng.normal(0.0, 2.0, (1, 5))
        t = int(rng.integers(0, 5))
        vals, _g = focal_and_grad(logits, np.array([t]), gamma=2.0, alpha=0.25)
        assert abs(vals[0] - oracle_focal(logits[0], t, 2.0, 0.25)) < 1e-12


# --- gradients against finite differences ----------------------------------------

def _check_grad(loss_fn, logits):
    work = logits.copy()

    def total():
        vals, _ = loss_fn(work)
        return float(vals.sum())

    _vals, grad = loss_fn(work)
    fd = fd_gradient(total, {"logits": work}, h=1e-6)["logits"]
    np.testing.assert_allclose(grad, fd, atol=1e-7)


def test_ce_gradient():
    rng = np.random.default_rng(4)
    logits = rng.normal(0.0, 2.0, (6, 5))
    targets = rng.integers(0, 5, 6)
    _check_grad(lambda lg: ce_and_grad(lg, targets), logits)


def test_ce_weighted_gradient():
    rng = np.random.default_rng(5)
    logits = rng.normal(0.0, 2.0, (6, 5))
    targets = rng.integers(0, 5, 6)
    weights = rng.random(5) + 0.5
    _check_grad(lambda lg: ce_and_grad(lg, targets, weights), logits)


def test_focal_gradient():
    rng = np.random.default_rng(6)
    logits = rng.normal(0.0, 2.0, (6, 5))
    targets = rng.integers(0, 5, 6)
    _check_grad(lambda lg: focal_and_grad(lg, targets, 2.0, 0.25), logits)


def test_focal_gamma_zero_gradient():
    rng = np.random.default_rng(7)
    logits = rng.normal(0.0, 2.0, (4, 3))
    targets = rng.integers(0, 3, 4)
    _check_grad(lambda lg: focal_and_grad(lg, targets, 0.0, 1.0), logits)


# --- reweighting dispatch ----------------------------------------------------------

def test_reweight_all_equal_is_plain_ce():
    rng = np.random.default_rng(8)
    logits = rng.normal(0.0, 2.0, (12, 4))
    targets = rng.integers(0, 4, 12)
    wvals, wgrad = predicate_loss_and_grad(logits, targets, "reweight",
                                           np.ones(4), 2.0, 0.25)
    cvals, cgrad = predicate_loss_and_grad(logits, targets, "none", None, 2.0, 0.25)
    np.testing.assert_array_equal(wvals, cvals)
    np.testing.assert_array_equal(wgrad, cgrad)


def test_reweight_scales_per_target():
    logits = np.zeros((2, 2))
    targets = np.array([0, 1])
    weights = np.array([0.5, 1.5])
    vals, grad = predicate_loss_and_grad(logits, targets, "reweight", weights, 2.0, 0.25)
    np.testing.assert_allclose(vals, [0.5 * np.log(2), 1.5 * np.log(2)], atol=1e-15)
    plain_vals, plain_grad = ce_and_grad(logits, targets)
    np.testing.assert_allclose(grad[0], 0.5 * plain_grad[0], atol=1e-15)
    np.testing.assert_allclose(grad[1], 1.5 * plain_grad[1], atol=1e-15)


def test_reweight_requires_weights():
    with pytest.raises(ConfigError):
        predicate_loss_and_grad(np.zeros((1, 2)), np.array([0]), "reweight",
                                None, 2.0, 0.25)


def test_resample_mode_uses_plain_ce():
    rng = np.random.default_rng(9)
    logits = rng.normal(0.0, 2.0, (5, 3))
    targets = rng.integers(0, 3, 5)
    rvals, rgrad = predicate_loss_and_grad(logits, targets, "resample", None, 2.0, 0.25)
    cvals, cgrad = ce_and_grad(logits, targets)
    np.testing.assert_array_equal(rvals, cvals)
    np.testing.assert_array_equal(rgrad, cgrad)
