import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isgd import models
from isgd.data import Dataset
from isgd.engine import (
    AdaGradDiag,
    AmariFisher,
    ConfigError,
    DivergenceError,
    Fixed,
    LearningRate,
    SgdConfig,
    SgdState,
    adagrad_step,
    amari_step,
    averaged_step,
    explicit_step,
    fit,
    fixed_point_batch,
    implicit_bracket,
    implicit_step,
    solve_fixed_point,
)
from isgd.models import Observation

# brentq oracle on xi + sigmoid(xi) = 1, frozen
LOGIT_XI = 0.40105813754154707
LOGIT_LAMBDA = 0.8021162750830941


def obs(x, y):
    return Observation(np.atleast_1d(np.asarray(x, dtype=float)), float(y))


def state(theta, **kw):
    return SgdState.initial(np.atleast_1d(np.asarray(theta, dtype=float)), **kw)


# ---------------------------------------------------------------- rates

def test_learning_rate_modes():
    assert LearningRate(2.0)(4) == 0.5
    assert np.isclose(LearningRate(1.0, 0.5)(4), 0.5)
    assert LearningRate(0.3, mode="constant")(1000) == 0.3
    sg = LearningRate(10.0, mode="safeguard")
    assert sg(1, 1.0) == 0.3
    assert np.isclose(sg(100, 0.0), 0.1)
    with pytest.raises(ValueError):
        sg(1)


@pytest.mark.parametrize("kw", [dict(gamma1=0.0), dict(gamma1=1.0, exponent=0.4),
                                dict(gamma1=1.0, exponent=1.5), dict(gamma1=1.0, mode="cosine")])
def test_learning_rate_validation(kw):
    with pytest.raises(ConfigError):
        LearningRate(**kw)


# ---------------------------------------------------------------- explicit

def test_explicit_examples():
    s = explicit_step(state([0, 0]), models.normal(), obs([1, 0], 2), LearningRate(1, mode="constant"))
    assert np.allclose(s.theta, [2, 0]) and s.n == 1
    th = np.array([0.3, -1.0])
    x = np.array([1.0, 2.0])
    s = explicit_step(state(th), models.normal(), obs(x, x @ th), LearningRate(1, mode="constant"))
    assert np.allclose(s.theta, th)
    s = explicit_step(state([0]), models.normal(), obs([1], 1), LearningRate(2, mode="constant"))
    assert np.allclose(s.theta, [2.0])


def test_explicit_refuses_nonfinite_gradient():
    with pytest.raises(DivergenceError) as err:
        explicit_step(state([800.0]), models.poisson(), obs([1], 1), LearningRate(1))
    assert np.allclose(err.value.theta, [800.0])


# ---------------------------------------------------------------- bracket/solver

def _logit_obs_with_r(r):
    # logistic, theta = 0: ell' = y - 0.5, so gamma * (y - 0.5) = r with y in {0, 1}
    y = 1.0 if r > 0 else 0.0
    return obs([1], y), abs(r) / 0.5


def test_bracket_examples():
    o, g = _logit_obs_with_r(2.0)
    b = implicit_bracket(models.logistic(), o, np.zeros(1), g)
    assert (b.lo, b.hi) == (0.0, 2.0)
    o, g = _logit_obs_with_r(-0.5)
    b = implicit_bracket(models.logistic(), o, np.zeros(1), g)
    assert (b.lo, b.hi) == (-0.5, 0.0)
    b = implicit_bracket(models.normal(), obs([1], 0), np.zeros(1), 1.0)
    assert (b.lo, b.hi) == (0.0, 0.0) and b.width == 0.0
    with pytest.raises(ValueError):
        implicit_bracket(models.normal(), obs([1], 0), np.zeros(1), 0.0)


def test_solve_normal_closed_form_and_bisection():
    xi, lam = solve_fixed_point(models.normal(), obs([1, 0], 2), np.zeros(2), 1.0, 1.0)
    assert np.isclose(xi, 1.0) and np.isclose(lam, 0.5)
    xi_b, lam_b = solve_fixed_point(models.normal(), obs([1, 0], 2), np.zeros(2), 1.0, 1.0,
                                    closed_form=False)
    assert abs(xi_b - 1.0) <= 1e-10 and abs(lam_b - 0.5) <= 1e-10


def test_solve_zero_gradient():
    for model, o, th in [(models.normal(), obs([1, 2], 3), np.array([1.0, 1.0])),
                         (models.poisson(), obs([1], 2), np.array([math.log(2.0)]))]:
        xi, lam = solve_fixed_point(model, o, th, 0.7, float(o.x @ o.x))
        assert xi == 0.0 and lam == 1.0


def test_solve_logistic_against_oracle():
    xi, lam = solve_fixed_point(models.logistic(), obs([1], 1), np.zeros(1), 1.0, 1.0)
    assert abs(xi - LOGIT_XI) < 1e-9
    assert abs(lam - LOGIT_LAMBDA) < 1e-9


def test_fixed_point_residual_tolerance():
    rng = np.random.default_rng(3)
    m = models.poisson()
    eta = rng.normal(0, 2, 500)
    y = rng.poisson(3, 500).astype(float)
    gamma = 10 ** rng.uniform(-3, 3, 500)
    q = rng.uniform(0.01, 10, 500)
    xi, r = fixed_point_batch(m.ell_prime, eta, y, gamma, q)
    res = np.abs(xi - gamma * m.ell_prime(eta + xi * q, y))
    assert np.all(res <= 1e-8 * np.maximum(1, np.abs(r)))


def test_fixed_point_tiny_gradient_keeps_lambda_positive():
    # |r| far below the absolute tolerance must still give lambda in (0, 1]
    m = models.poisson()
    eta = np.array([math.log(3.0) + 1e-14])
    xi, r = fixed_point_batch(m.ell_prime, eta, 3.0, 0.5, 1.0)
    assert r[()] != 0 and 0 < xi[()] / r[()] <= 1


# ---------------------------------------------------------------- implicit

def test_implicit_examples():
    rate = LearningRate(1.0, mode="constant")
    s = implicit_step(state([0]), models.normal(), obs([1], 2), rate)
    assert np.allclose(s.theta, [1.0])
    e = explicit_step(state([0]), models.normal(), obs([1], 2), rate)
    assert np.allclose(e.theta, [2.0])
    th = np.array([0.5, -0.2])
    x = np.array([1.0, 3.0])
    s = implicit_step(state(th), models.normal(), obs(x, x @ th), rate)
    assert np.allclose(s.theta, th)
    s = implicit_step(state([0]), models.normal(), obs([1], 2), LearningRate(100.0, mode="constant"))
    assert np.allclose(s.theta, [200.0 / 101.0])


def test_implicit_tracks_lambda():
    s = state([0, 0], track_lambda=True)
    rate = LearningRate(1.0)
    for x, y in [([1, 0], 2), ([0, 1], -1), ([1, 1], 0.5)]:
        s = implicit_step(s, models.logistic(), obs(x, float(y > 0)), rate)
    assert len(s.lambda_history) == 3
    assert all(0 < v <= 1 for v in s.lambda_history)


def test_implicit_fixed_conditioner():
    C = np.array([[2.0, 0.5], [0.5, 1.0]])
    s = implicit_step(SgdState.initial(np.zeros(2), Fixed(C)), models.normal(), obs([1, 2], 3),
                      LearningRate(1.0, mode="constant"))
    # closed form with q = x'Cx
    x = np.array([1.0, 2.0])
    xi = 3.0 / (1 + x @ C @ x)
    assert np.allclose(s.theta, xi * C @ x)


def test_fixed_conditioner_validation():
    with pytest.raises(ConfigError):
        Fixed(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ConfigError):
        Fixed(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_shrinkage_identity_from_zero():
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = rng.normal(size=4)
        y = rng.normal()
        g = 10 ** rng.uniform(-2, 2)
        rate = LearningRate(g, mode="constant")
        imp = implicit_step(state(np.zeros(4)), models.normal(), obs(x, y), rate).theta
        exp_ = explicit_step(state(np.zeros(4)), models.normal(), obs(x, y), rate).theta
        assert np.allclose(imp, exp_ / (1 + g * x @ x), rtol=1e-12, atol=1e-14)


def test_nlms_bisection_matches_closed_form():
    rng = np.random.default_rng(2)
    n = 10_000
    eta = rng.normal(0, 3, n)
    y = rng.normal(0, 3, n)
    gamma = 10 ** rng.uniform(-3, 3, n)
    q = rng.uniform(0.01, 20, n)
    xb, _ = fixed_point_batch(models.normal().ell_prime, eta, y, gamma, q)
    xc, _ = fixed_point_batch(models.normal().ell_prime, eta, y, gamma, q, closed_form=True)
    assert np.all(np.abs(xb - xc) <= 1e-10 * np.maximum(1, np.abs(gamma * (y - eta))))


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(["normal", "poisson", "logistic", "huber", "squared"]),
       st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       st.floats(0, 8), st.floats(-3, 3))
def test_lambda_in_unit_interval(token, x, theta, y, loggamma):
    model = models.from_token(token)
    if token == "poisson":
        y = float(round(y))
    elif token == "logistic":
        y = float(y > 4)
    x = np.array(x)
    if not x @ x > 0:
        return
    xi, lam = solve_fixed_point(model, obs(x, y), np.array(theta), 10 ** loggamma, float(x @ x))
    assert 0 < lam <= 1


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       st.booleans(), st.floats(-3, 3))
def test_logistic_step_bound(x, theta, y, loggamma):
    x = np.array(x)
    g = 10 ** loggamma
    s = implicit_step(state(theta), models.logistic(), obs(x, float(y)), LearningRate(g, mode="constant"))
    assert np.linalg.norm(s.theta - np.array(theta)) <= 2 * g * np.linalg.norm(x) + 1e-12


# ---------------------------------------------------------------- averaging

def test_averaged_examples():
    rate = LearningRate(1.0, 0.7)
    s = averaged_step(state([0]), models.normal(), obs([1], 2), rate)
    assert np.allclose(s.avg_theta, s.theta)
    # theta_1 = 1, theta_2 = 3: explicit constant-rate steps on y chosen to land there
    c = LearningRate(1.0, mode="constant")
    s = averaged_step(state([0]), models.normal(), obs([1], 1), c, implicit=False)
    s = averaged_step(s, models.normal(), obs([1], 3), c, implicit=False)
    assert np.allclose(s.theta, [3.0]) and np.allclose(s.avg_theta, [2.0])
    s = state([1.5])
    for _ in range(5):
        s = averaged_step(s, models.normal(), obs([2.0], 3.0), rate)
        assert np.allclose(s.avg_theta, [1.5])


def test_averaging_matches_bruteforce_mean():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 3))
    y = X @ np.array([1.0, -1.0, 0.5]) + rng.normal(size=300)
    res = fit(Dataset(X, y), models.normal(),
              SgdConfig(method="implicit_avg", rate=LearningRate(1.0, 0.6), seed=9, stride=1))
    traj = res.trajectory[1:, 1:]
    assert np.max(np.abs(res.avg_theta - traj.mean(axis=0))) <= 1e-12


# ---------------------------------------------------------------- adagrad

def test_adagrad_first_step_and_zero_coordinate():
    s = SgdState.initial(np.zeros(2), AdaGradDiag(np.zeros(2), eps=0.0))
    s = adagrad_step(s, models.normal(), obs([1, 0], 3), LearningRate(1.0, mode="constant"))
    assert np.allclose(s.theta, [1.0, 0.0])
    assert np.allclose(s.conditioner.accum, [9.0, 0.0])


def test_adagrad_zero_gradient():
    s = SgdState.initial(np.array([2.0]), AdaGradDiag(np.array([4.0]), eps=0.0))
    s2 = adagrad_step(s, models.normal(), obs([1], 2), LearningRate(1.0, mode="constant"))
    assert np.allclose(s2.theta, [2.0]) and np.allclose(s2.conditioner.accum, [4.0])


def test_adagrad_two_identical_gradients():
    # keep the gradient at 1 by moving y with theta
    s = SgdState.initial(np.zeros(1), AdaGradDiag(np.zeros(1), eps=0.0))
    s = adagrad_step(s, models.normal(), obs([1], 1), LearningRate(1.0, mode="constant"))
    assert np.allclose(s.theta, [1.0])
    s = adagrad_step(s, models.normal(), obs([1], 2), LearningRate(1.0, mode="constant"))
    assert np.allclose(s.theta, [1.0 + 1.0 / math.sqrt(2.0)])


def test_adagrad_needs_constant_rate():
    s = SgdState.initial(np.zeros(1), AdaGradDiag.zeros(1))
    with pytest.raises(ConfigError):
        adagrad_step(s, models.normal(), obs([1], 1), LearningRate(1.0))


# ---------------------------------------------------------------- amari

def test_amari_first_step_is_outer_product():
    s = SgdState.initial(np.zeros(2), AmariFisher.initial(2, a1=1.0))
    s = amari_step(s, models.normal(), obs([1, 2], 1), LearningRate(1.0))
    g = np.array([1.0, 2.0])
    assert np.allclose(s.conditioner.cinv, np.outer(g, g))
    # singular estimate: ridge used for the solve, theta still finite
    assert np.all(np.isfinite(s.theta))


def test_amari_zero_gradient_decays():
    s = SgdState.initial(np.array([1.0]), AmariFisher(np.array([[1.0]]), a1=0.5))
    for _ in range(20):
        s = amari_step(s, models.normal(), obs([1], 1.0), LearningRate(1.0))
    assert np.allclose(s.theta, [1.0])
    assert np.isclose(s.conditioner.cinv[0, 0], np.prod(1 - 0.5 / np.arange(1, 21)))


def test_amari_scalar_converges_to_constant():
    # y - theta keeps |g| = 2 at theta = 0 with x = 1 and the theta pinned by a tiny rate
    s = SgdState.initial(np.zeros(1), AmariFisher(np.array([[7.0]]), a1=1.0))
    for _ in range(200):
        s = amari_step(s, models.normal(), obs([1], s.theta[0] + 2.0), LearningRate(1e-9, mode="constant"))
    assert np.isclose(s.conditioner.cinv[0, 0], 4.0)


def test_amari_validation():
    with pytest.raises(ConfigError):
        AmariFisher.initial(2, a1=1.5)


# ---------------------------------------------------------------- fit

def _linear_data(n=200, p=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    return Dataset(X, X @ np.arange(1.0, p + 1) + 0.1 * rng.normal(size=n))


def test_fit_zero_passes():
    res = fit(_linear_data(), models.normal(), SgdConfig(npasses=0, seed=1, theta0=np.ones(3)))
    assert np.allclose(res.theta, 1.0) and res.n_steps == 0


def test_fit_scalar_contraction_monotone():
    X = np.ones((40, 1)) * 0.9
    y = 0.9 * 2.5 * np.ones(40)
    res = fit(Dataset(X, y), models.normal(),
              SgdConfig(method="explicit", rate=LearningRate(0.5, mode="constant"),
                        sampling="stream", stride=1))
    err = np.abs(res.trajectory[:, 1] - 2.5)
    assert np.all(np.diff(err) < 0)


def test_fit_explicit_divergence_flag():
    data = _linear_data(200, 3, seed=5)
    lam_max = np.linalg.eigvalsh(data.X.T @ data.X / data.n).max()
    res = fit(data, models.normal(),
              SgdConfig(method="explicit", rate=LearningRate(4.0 / lam_max, mode="constant"), seed=2))
    assert res.diverged and "exceeded" in res.message
    imp = fit(data, models.normal(),
              SgdConfig(method="implicit", rate=LearningRate(4.0 / lam_max, mode="constant"), seed=2))
    assert not imp.diverged


def test_fit_deterministic_and_seeded():
    data = _linear_data()
    cfg = SgdConfig(method="implicit", seed=11, npasses=2)
    a, b = fit(data, models.normal(), cfg), fit(data, models.normal(), cfg)
    assert np.array_equal(a.theta, b.theta)
    with pytest.raises(ConfigError):
        fit(data, models.normal(), SgdConfig(seed=None))


def test_fit_converges_all_methods():
    data = _linear_data(2000, 3, seed=8)
    truth = np.arange(1.0, 4.0)
    for method, rate in [("implicit", LearningRate(1.0)), ("explicit", LearningRate(0.5)),
                         ("implicit_avg", LearningRate(1.0, 0.6)), ("explicit_avg", LearningRate(0.3, 0.6)),
                         ("adagrad", LearningRate(0.5, mode="constant"))]:
        res = fit(data, models.normal(), SgdConfig(method=method, rate=rate, seed=3, npasses=3))
        est = res.avg_theta if method.endswith("avg") else res.theta
        assert np.linalg.norm(est - truth) < 0.2, method


def test_fit_amari_near_fisher_start():
    # unit noise, estimate seeded at the Fisher: behaves like a 1/n Newton recursion
    rng = np.random.default_rng(12)
    scale = np.array([1.0, 2.0, 0.5])
    X = rng.normal(size=(3000, 3)) * scale
    truth = np.array([1.0, -1.0, 2.0])
    data = Dataset(X, X @ truth + rng.normal(size=3000))
    cond = AmariFisher(np.diag(scale ** 2), a1=0.05)
    res = fit(data, models.normal(), SgdConfig(method="amari", rate=LearningRate(1.0), seed=3,
                                               conditioner=cond, theta0=np.zeros(3), npasses=2))
    assert not res.diverged
    assert np.linalg.norm(res.theta - truth) < 0.2


@pytest.mark.parametrize("kw", [
    dict(method="implicit", conditioner="adagrad"),
    dict(method="implicit", conditioner="amari"),
    dict(method="implicit_avg", conditioner="adagrad"),
    dict(method="adagrad", rate=LearningRate(1.0)),
    dict(method="newton"),
    dict(method="implicit", conditioner="bogus"),
    dict(method="implicit", niters=5, npasses=1.0),
    dict(method="implicit", sampling="shuffle"),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        fit(_linear_data(), models.normal(), SgdConfig(seed=1, **kw))
