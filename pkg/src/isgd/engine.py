"""Explicit and implicit SGD recursions, averaging, AdaGrad and Amari steps.

The implicit update ``theta_n = theta_{n-1} + g_n C x ell'(x @ theta_n; y)``
collapses to a scalar equation because the likelihood depends on ``theta``
only through ``eta = x @ theta``.  Writing ``r = g_n ell'(x @ theta_{n-1}; y)``
the new iterate is ``theta_{n-1} + xi C x`` where ``xi`` lies between 0 and
``r`` and solves

    xi = g_n * ell'(x @ theta_{n-1} + xi * x @ C @ x; y).

The right-hand side minus ``xi`` is strictly decreasing, so bisection on
``[min(0, r), max(0, r)]`` always finds the unique root.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .data import Dataset
from .models import NaturalParamModel, Observation

FP_TOL = 1e-10
FP_MAX_ITER = 200
BLOWUP_THRESHOLD = 1e8

METHODS = ("explicit", "implicit", "explicit_avg", "implicit_avg", "adagrad", "amari")


class ConfigError(ValueError):
    pass


class DivergenceError(ArithmeticError):
    """A step produced a non-finite gradient; ``theta`` is the iterate before it."""

    def __init__(self, msg, theta=None, n=None):
        super().__init__(msg)
        self.theta = None if theta is None else np.array(theta, copy=True)
        self.n = n


class FixedPointError(ArithmeticError):
    def __init__(self, msg, bracket=None, residual=None):
        super().__init__(msg)
        self.bracket = bracket
        self.residual = residual


# ---------------------------------------------------------------- learning rates

@dataclass(frozen=True)
class LearningRate:
    """Step-size schedule.

    ``power``: ``gamma1 * n**-exponent``.  ``constant``: ``gamma1``.
    ``safeguard``: ``min(cap, gamma1 / (n + ||x||^2))``, the stabilised explicit
    schedule; it needs the current covariate norm.
    """

    gamma1: float
    exponent: float = 1.0
    mode: str = "power"
    cap: float = 0.3

    def __post_init__(self):
        if not self.gamma1 > 0:
            raise ConfigError("gamma1 must be positive")
        if self.mode not in ("power", "constant", "safeguard"):
            raise ConfigError(f"unknown learning-rate mode {self.mode!r}")
        if self.mode == "power" and not 0.5 <= self.exponent <= 1.0:
            raise ConfigError("power-law exponent must lie in [0.5, 1]")
        if self.mode == "safeguard" and not self.cap > 0:
            raise ConfigError("safeguard cap must be positive")

    def __call__(self, n, sqnorm=None):
        if self.mode == "constant":
            return self.gamma1
        if self.mode == "power":
            return self.gamma1 * float(n) ** (-self.exponent)
        if sqnorm is None:
            raise ValueError("safeguard learning rate needs ||x||^2")
        return np.minimum(self.cap, self.gamma1 / (n + np.asarray(sqnorm, dtype=float)))


# ------------------------------------------------------------------ conditioners

@dataclass(frozen=True)
class Identity:
    def apply(self, g):
        return g

    def quad(self, x):
        return float(x @ x)


@dataclass(frozen=True, eq=False)
class Fixed:
    C: np.ndarray

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if C.shape[0] != C.shape[1] or not np.allclose(C, C.T, rtol=0, atol=1e-12):
            raise ConfigError("conditioner matrix must be square and symmetric")
        if np.linalg.eigvalsh(C).min() <= 0:
            raise ConfigError("conditioner matrix must be positive definite")
        object.__setattr__(self, "C", C)

    def apply(self, g):
        return self.C @ g

    def quad(self, x):
        return float(x @ self.C @ x)


@dataclass(frozen=True, eq=False)
class AdaGradDiag:
    accum: np.ndarray
    eps: float = 1e-8

    @classmethod
    def zeros(cls, p, eps=1e-8):
        return cls(np.zeros(p), eps)


@dataclass(frozen=True, eq=False)
class AmariFisher:
    """Running estimate ``cinv`` of the Fisher information with rate ``a1 / n``."""

    cinv: np.ndarray
    a1: float = 1.0
    ridge: float = 1e-8

    def __post_init__(self):
        if not 0 < self.a1 <= 1:
            raise ConfigError("Amari rate a1 must lie in (0, 1]")

    @classmethod
    def initial(cls, p, a1=1.0, ridge=1e-8):
        return cls(np.eye(p), a1, ridge)


Conditioner = Union[Identity, Fixed, AdaGradDiag, AmariFisher]


# ------------------------------------------------------------------------ state

@dataclass
class SgdState:
    theta: np.ndarray
    n: int = 0
    avg_theta: Optional[np.ndarray] = None
    conditioner: Conditioner = field(default_factory=Identity)
    lambda_history: Optional[list] = None

    @classmethod
    def initial(cls, theta0, conditioner=None, track_lambda=False):
        theta0 = np.array(theta0, dtype=float, copy=True).reshape(-1)
        return cls(theta0, 0, theta0.copy(), conditioner or Identity(),
                   [] if track_lambda else None)


# ------------------------------------------------------------- fixed-point solve

@dataclass(frozen=True)
class FixedPointBracket:
    lo: float
    hi: float

    @property
    def width(self):
        return self.hi - self.lo


def implicit_bracket(model: NaturalParamModel, obs: Observation, theta, gamma_n) -> FixedPointBracket:
    if not gamma_n > 0:
        raise ValueError("gamma_n must be positive")
    r = float(gamma_n * model.ell_prime(np.dot(obs.x, theta), obs.y))
    if not np.isfinite(r):
        raise FixedPointError("non-finite search bound", residual=r)
    return FixedPointBracket(0.0, r) if r > 0 else FixedPointBracket(r, 0.0)


def fixed_point_batch(ell_prime: Callable, eta, y, gamma, q, *, closed_form=False,
                      tol=FP_TOL, max_iter=FP_MAX_ITER):
    """Vectorized solve of ``xi = gamma * ell_prime(eta + xi * q, y)``.

    All arguments broadcast together.  Returns ``(xi, r)`` where
    ``r = gamma * ell_prime(eta, y)``.  With ``closed_form`` the score is taken
    to be ``y - eta`` and ``xi = r / (1 + gamma q)`` is returned directly.

    Bisection stops once the residual is below ``tol * max(1, |r|)``; since the
    residual has slope at most -1 this also bounds the error in ``xi``.
    """
    eta, y, gamma, q = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (eta, y, gamma, q)))
    with np.errstate(over="ignore", invalid="ignore"):
        r = gamma * ell_prime(eta, y)
    if not np.all(np.isfinite(r)):
        raise FixedPointError("non-finite search bound", residual=r)
    if closed_form:
        return r / (1.0 + gamma * q), r

    lo = np.minimum(r, 0.0)
    hi = np.maximum(r, 0.0)
    ftol = tol * np.maximum(1.0, np.abs(r))

    def g(xi):
        with np.errstate(over="ignore", invalid="ignore"):
            return gamma * ell_prime(eta + xi * q, y) - xi

    # only exact endpoint roots are taken (r == 0, q == 0); otherwise iterate
    # from the interior so that xi / r stays strictly positive
    g_r = g(r)
    done = (r == 0.0) | (g_r == 0.0)
    xi = np.where(r == 0.0, 0.0, np.where(g_r == 0.0, r, 0.5 * r))
    for _ in range(max_iter):
        if done.all():
            break
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        xi = np.where(done, xi, mid)
        pos = gm > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
        resolved = (hi - lo) <= 4.0 * np.finfo(float).eps * np.maximum(np.abs(lo), np.abs(hi))
        done = done | (np.abs(gm) <= ftol) | resolved
    else:
        if not done.all():
            res = np.abs(g(xi))
            raise FixedPointError(
                f"bisection did not converge in {max_iter} iterations",
                bracket=(lo, hi), residual=res)
    return xi, r


def solve_fixed_point(model: NaturalParamModel, obs: Observation, theta, gamma_n,
                      quad_form, *, closed_form=None):
    """Scalar implicit-update solve.  Returns ``(xi, lam)`` with ``lam = xi / r``.

    ``lam`` is defined as 1 when the gradient at the previous iterate is zero.
    The linear-score models (normal, squared loss) use the closed form unless
    ``closed_form=False`` is passed.
    """
    if quad_form < 0:
        raise ValueError("quad_form must be nonnegative")
    if closed_form is None:
        closed_form = model.has_linear_score
    bracket = implicit_bracket(model, obs, theta, gamma_n)
    eta = float(np.dot(obs.x, theta))
    xi, r = fixed_point_batch(model.ell_prime, eta, obs.y, gamma_n, quad_form,
                              closed_form=closed_form)
    xi, r = float(xi), float(r)
    if r == 0.0:
        return 0.0, 1.0
    # bisection cannot leave the bracket; guard the closed form too
    xi = min(max(xi, bracket.lo), bracket.hi)
    return xi, xi / r


# ------------------------------------------------------------------------ steps

def conditioned_direction(conditioner, x):
    if isinstance(conditioner, (Identity, Fixed)):
        return conditioner.apply(x)
    raise ConfigError(f"{type(conditioner).__name__} conditioner is not valid for this step")


def _gradient(state, model, obs):
    g = model.score(obs.x, obs.y, state.theta)
    if not np.all(np.isfinite(g)):
        raise DivergenceError(f"non-finite gradient at step {state.n + 1}", state.theta, state.n)
    return g


def step_size(rate, n, x):
    return float(rate(n, float(np.dot(x, x)))) if rate.mode == "safeguard" else float(rate(n))


def explicit_step(state: SgdState, model: NaturalParamModel, obs: Observation,
                  rate: LearningRate) -> SgdState:
    x = np.asarray(obs.x, dtype=float)
    n = state.n + 1
    g = _gradient(state, model, obs)
    conditioned_direction(state.conditioner, x)  # validates the conditioner kind
    theta = state.theta + step_size(rate, n, x) * state.conditioner.apply(g)
    return dataclasses.replace(state, theta=theta, n=n)


def implicit_step(state: SgdState, model: NaturalParamModel, obs: Observation,
                  rate: LearningRate) -> SgdState:
    x = np.asarray(obs.x, dtype=float)
    n = state.n + 1
    direction = conditioned_direction(state.conditioner, x)
    gamma = step_size(rate, n, x)
    xi, lam = solve_fixed_point(model, Observation(x, obs.y), state.theta, gamma,
                                state.conditioner.quad(x))
    history = state.lambda_history
    if history is not None:
        history = history + [lam]
    return dataclasses.replace(state, theta=state.theta + xi * direction, n=n,
                               lambda_history=history)


def averaged_step(state: SgdState, model: NaturalParamModel, obs: Observation,
                  rate: LearningRate, implicit: bool = True) -> SgdState:
    new = (implicit_step if implicit else explicit_step)(state, model, obs, rate)
    k = new.n
    prev = state.avg_theta if state.avg_theta is not None else new.theta
    avg = ((k - 1) * prev + new.theta) / k
    return dataclasses.replace(new, avg_theta=avg)


def adagrad_step(state: SgdState, model: NaturalParamModel, obs: Observation,
                 rate: LearningRate) -> SgdState:
    """Diagonal AdaGrad with the constant rate ``gamma1``.

    Coordinates with zero gradient are left alone, which also settles the
    0/0 case on the first step when ``eps == 0``.
    """
    cond = state.conditioner
    if not isinstance(cond, AdaGradDiag):
        raise ConfigError("adagrad_step needs an AdaGradDiag conditioner")
    if rate.mode != "constant":
        raise ConfigError("AdaGrad uses a constant learning rate")
    g = _gradient(state, model, obs)
    accum = cond.accum + g * g
    nz = g != 0
    step = np.zeros_like(g)
    step[nz] = rate.gamma1 * g[nz] / (np.sqrt(accum[nz]) + cond.eps)
    return dataclasses.replace(state, theta=state.theta + step, n=state.n + 1,
                               conditioner=dataclasses.replace(cond, accum=accum))


def amari_step(state: SgdState, model: NaturalParamModel, obs: Observation,
               rate: LearningRate) -> SgdState:
    """Explicit step preconditioned by a running Fisher estimate.

    The estimate is updated first with weight ``a1 / n``; a ridge is added for
    the solve only when it is singular to working precision.
    """
    cond = state.conditioner
    if not isinstance(cond, AmariFisher):
        raise ConfigError("amari_step needs an AmariFisher conditioner")
    n = state.n + 1
    x = np.asarray(obs.x, dtype=float)
    g = _gradient(state, model, obs)
    a = cond.a1 / n
    cinv = (1.0 - a) * cond.cinv + a * np.outer(g, g)
    M = 0.5 * (cinv + cinv.T)
    ev = np.linalg.eigvalsh(M)
    if ev[0] <= 1e-12 * max(1.0, abs(ev[-1])):
        M = M + cond.ridge * np.eye(len(g))
    theta = state.theta + step_size(rate, n, x) * np.linalg.solve(M, g)
    return dataclasses.replace(state, theta=theta, n=n,
                               conditioner=dataclasses.replace(cond, cinv=cinv))


# -------------------------------------------------------------------------- fit

@dataclass
class SgdConfig:
    """Everything :func:`fit` needs besides the data and the model.

    ``conditioner`` is ``None`` (inferred from the method), one of the tokens
    ``"identity"``, ``"adagrad"``, ``"amari"``, or a conditioner instance.
    ``sampling="replace"`` draws indices uniformly with replacement from a
    PRNG seeded by ``seed``; ``"stream"`` walks the data in order.
    """

    method: str = "implicit"
    rate: LearningRate = field(default_factory=lambda: LearningRate(1.0))
    conditioner: object = None
    seed: Optional[int] = None
    niters: Optional[int] = None
    npasses: Optional[float] = None
    sampling: str = "replace"
    track_lambda: bool = False
    blowup_threshold: float = BLOWUP_THRESHOLD
    stride: int = 0
    theta0: Optional[np.ndarray] = None
    adagrad_eps: float = 1e-8
    amari_a1: float = 1.0


@dataclass
class FitResult:
    theta: np.ndarray
    avg_theta: np.ndarray
    n_steps: int
    diverged: bool = False
    lambdas: Optional[np.ndarray] = None
    trajectory: Optional[np.ndarray] = None
    message: str = ""


def resolve_conditioner(config: SgdConfig, p: int) -> Conditioner:
    """Validate the method/conditioner pairing and build the initial conditioner."""
    method, cond = config.method, config.conditioner
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if isinstance(cond, str):
        token = cond.lower()
        if token not in ("identity", "adagrad", "amari"):
            raise ConfigError(f"unknown conditioner {cond!r}")
        cond = {"identity": Identity(),
                "adagrad": AdaGradDiag.zeros(p, config.adagrad_eps),
                "amari": AmariFisher.initial(p, config.amari_a1)}[token]
    if cond is None:
        cond = {"adagrad": AdaGradDiag.zeros(p, config.adagrad_eps),
                "amari": AmariFisher.initial(p, config.amari_a1)}.get(method, Identity())
    if method == "adagrad":
        if not isinstance(cond, AdaGradDiag):
            raise ConfigError("method adagrad needs the adagrad conditioner")
        if config.rate.mode != "constant":
            raise ConfigError("method adagrad needs lr_mode=constant")
    elif method == "amari":
        if not isinstance(cond, AmariFisher):
            raise ConfigError("method amari needs the amari conditioner")
    elif not isinstance(cond, (Identity, Fixed)):
        raise ConfigError(f"method {method} does not support the "
                          f"{type(cond).__name__} conditioner")
    if isinstance(cond, Fixed) and cond.C.shape[0] != p:
        raise ConfigError("conditioner dimension does not match the data")
    return cond


def step_function(method: str) -> Callable:
    return {
        "explicit": explicit_step,
        "implicit": implicit_step,
        "explicit_avg": lambda s, m, o, r: averaged_step(s, m, o, r, implicit=False),
        "implicit_avg": averaged_step,
        "adagrad": adagrad_step,
        "amari": amari_step,
    }[method]


def n_iterations(config: SgdConfig, n_data: int) -> int:
    if config.niters is not None and config.npasses is not None:
        raise ConfigError("give niters or npasses, not both")
    if config.niters is not None:
        if config.niters < 0:
            raise ConfigError("niters must be nonnegative")
        return int(config.niters)
    if config.npasses is not None:
        if config.npasses < 0:
            raise ConfigError("npasses must be nonnegative")
        return int(round(config.npasses * n_data))
    return n_data


def sample_indices(config: SgdConfig, n_data: int, n_iter: int) -> np.ndarray:
    if config.sampling == "stream":
        return np.arange(n_iter) % n_data
    if config.sampling != "replace":
        raise ConfigError(f"unknown sampling mode {config.sampling!r}")
    if config.seed is None:
        raise ConfigError("a seed is required when sampling with replacement")
    return np.random.default_rng(config.seed).integers(0, n_data, size=n_iter)


def run_loop(state: SgdState, n_iter: int, config: SgdConfig, step: Callable) -> FitResult:
    """Drive ``step(state, k)`` for ``k = 0..n_iter-1``, watching for blow-up."""
    traj = [np.concatenate([[0], state.theta])] if config.stride > 0 else None
    diverged, message = False, ""
    for k in range(n_iter):
        try:
            new = step(state, k)
        except DivergenceError as err:
            diverged, message = True, str(err)
            break
        state = new
        if not np.all(np.isfinite(state.theta)) or np.max(np.abs(state.theta)) > config.blowup_threshold:
            diverged = True
            message = f"iterate exceeded {config.blowup_threshold:g} at step {state.n}"
        if traj is not None and (state.n % config.stride == 0 or diverged):
            traj.append(np.concatenate([[state.n], state.theta]))
        if diverged:
            break
    lambdas = None if state.lambda_history is None else np.asarray(state.lambda_history)
    return FitResult(theta=state.theta, avg_theta=state.avg_theta, n_steps=state.n,
                     diverged=diverged, lambdas=lambdas,
                     trajectory=None if traj is None else np.array(traj), message=message)


def fit(dataset: Dataset, model: NaturalParamModel, config: SgdConfig) -> FitResult:
    """Run one SGD fit over ``dataset``.

    Divergence (non-finite gradient, or ``max |theta_j|`` above the blow-up
    threshold) stops the run with ``diverged=True`` and keeps the last iterate.
    """
    if dataset.n == 0:
        raise ConfigError("empty dataset")
    cond = resolve_conditioner(config, dataset.p)
    n_iter = n_iterations(config, dataset.n)
    idx = sample_indices(config, dataset.n, n_iter)
    theta0 = np.zeros(dataset.p) if config.theta0 is None else config.theta0
    if np.shape(theta0) != (dataset.p,):
        raise ConfigError("theta0 has the wrong dimension")
    state = SgdState.initial(theta0, cond, config.track_lambda)
    step = step_function(config.method)
    X, y, rate = dataset.X, dataset.y, config.rate
    return run_loop(state, n_iter, config,
                    lambda s, k: step(s, model, Observation(X[idx[k]], y[idx[k]]), rate))
