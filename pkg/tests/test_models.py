import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isgd import models
from isgd.models import Observation, RobustLoss


def test_glm_score_normal():
    s = models.glm_score(models.normal(), Observation(np.array([1.0, 0.0]), 2.0), np.zeros(2))
    assert np.allclose(s, [2.0, 0.0])


def test_glm_score_poisson_at_mean():
    s = models.glm_score(models.poisson(), Observation(np.array([1.0, 0.0]), 2.0),
                         np.array([math.log(2.0), 0.0]))
    assert np.allclose(s, [0.0, 0.0], atol=1e-15)


def test_glm_score_logistic_half():
    s = models.glm_score(models.logistic(), Observation(np.array([1.0]), 1.0), np.zeros(1))
    # scalar oracle: 1 - 1 / (1 + e^0)
    assert np.allclose(s, [1.0 - 1.0 / (1.0 + math.exp(0.0))])


def test_glm_score_dimension_mismatch():
    with pytest.raises(ValueError):
        models.glm_score(models.normal(), Observation(np.ones(2), 1.0), np.zeros(3))


def test_glm_score_rejects_mloss():
    with pytest.raises(ValueError):
        models.glm_score(models.huber(), Observation(np.ones(2), 1.0), np.zeros(2))


def test_poisson_overflow_is_not_clamped():
    s = models.glm_score(models.poisson(), Observation(np.array([1.0]), 1.0), np.array([800.0]))
    assert not np.all(np.isfinite(s))


def test_mloss_examples():
    assert models.mloss_as_model(RobustLoss("squared")).ell_prime(0.0, 3.0) == 3.0
    hub = models.mloss_as_model(RobustLoss("huber", 1.0))
    assert hub.ell_prime(0.0, 3.0) == 1.0
    assert hub.ell_prime(0.5, 1.0) == 0.5


def test_robust_loss_validation():
    with pytest.raises(ValueError):
        RobustLoss("huber", 0.0)
    with pytest.raises(ValueError):
        RobustLoss("tukey")


def test_huber_rho_derivatives_consistent():
    loss = RobustLoss("huber", 1.345)
    r = np.linspace(-4, 4, 81)
    h = 1e-6
    num = (loss.rho(r + h) - loss.rho(r - h)) / (2 * h)
    assert np.allclose(num, loss.rho_prime(r), atol=1e-6)
    assert loss.rho_prime(0.0) == 0.0
    assert np.all(np.abs(loss.rho_prime(r)) <= 1.345)


def test_monotone_check_examples():
    grid = np.array([-1.0, 0.0, 1.0])
    assert models.ell_prime_monotone_check(models.logistic(), 1.0, grid)
    assert models.ell_prime_monotone_check(models.normal(), 0.0, grid)
    bad = models.NaturalParamModel(kind="synthetic", ell_prime=lambda eta, y: eta ** 2)
    assert not models.ell_prime_monotone_check(bad, 0.0, grid)


def test_monotone_check_needs_increasing_grid():
    with pytest.raises(ValueError):
        models.ell_prime_monotone_check(models.normal(), 0.0, np.array([0.0, 0.0, 1.0]))


def test_logistic_bounds():
    m = models.logistic()
    eta = np.linspace(-50, 50, 201)
    for y in (0.0, 1.0):
        assert np.all(np.abs(m.ell_prime(eta, y)) <= 1.0)
    assert m.lipschitz_L0 == 1.0


def test_from_token():
    assert models.from_token("normal").kind == "normal"
    assert models.from_token("Logistic").kind == "logistic"
    hub = models.from_token("huber:2.5")
    assert hub.loss.delta == 2.5
    assert models.from_token("huber").loss.delta == 1.345
    assert models.from_token("squared").has_linear_score
    for bad in ("gamma", "huber:x", ""):
        with pytest.raises(ValueError):
            models.from_token(bad)


ALL_MODELS = [models.normal(), models.poisson(), models.logistic(), models.huber(), models.squared()]


def _valid_y(model, y):
    if model.kind == "poisson":
        return float(abs(round(y)))
    if model.kind == "logistic":
        return float(y > 0)
    return y


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(range(len(ALL_MODELS))),
       st.floats(-20, 20), st.lists(st.floats(-30, 30), min_size=2, max_size=30, unique=True))
def test_ell_prime_nonincreasing(idx, y, etas):
    model = ALL_MODELS[idx]
    grid = np.sort(np.array(etas))
    if np.any(np.diff(grid) <= 0):
        return
    assert models.ell_prime_monotone_check(model, _valid_y(model, y), grid)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([models.normal(), models.poisson(), models.logistic()]),
       st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(0, 5))
def test_glm_score_collinear_with_x(model, x, theta, y):
    x = np.array(x)
    s = models.glm_score(model, Observation(x, _valid_y(model, y)), np.array(theta))
    # s is a scalar multiple of x: the 2x2 minors vanish
    M = np.outer(s, x) - np.outer(x, s)
    assert np.allclose(M, 0.0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from([models.huber(), models.huber(0.5), models.squared()]),
       st.floats(-20, 20), st.floats(-20, 20))
def test_mloss_symmetry(model, eta, y):
    assert np.isclose(model.ell_prime(eta, y), -model.ell_prime(2 * y - eta, y), atol=1e-12)
