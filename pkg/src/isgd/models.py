"""Natural-parameter likelihood adapters.

Every model here has a log-likelihood of the form ``ell(x @ theta; y)`` with
``ell`` concave in the scalar natural parameter ``eta = x @ theta``.  The
engine only ever needs the first derivative ``ell_prime(eta, y)``; the second
derivative and the transfer function are optional extras used by the
asymptotics code.

All callables are numpy-vectorized, so the same adapter serves a single
observation or a whole batch of replications.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

# exp() of anything larger overflows to inf; we report that instead of clamping.
POISSON_ETA_MAX = 700.0

HUBER_DEFAULT_DELTA = 1.345


class Observation(NamedTuple):
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class RobustLoss:
    """Convex loss ``rho`` on residuals ``r = y - eta``."""

    kind: str  # "huber" or "squared"
    delta: float = HUBER_DEFAULT_DELTA

    def __post_init__(self):
        if self.kind not in ("huber", "squared"):
            raise ValueError(f"unknown robust loss {self.kind!r}")
        if self.kind == "huber" and not self.delta > 0:
            raise ValueError("huber delta must be positive")

    def rho(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "squared":
            return 0.5 * r * r
        a = np.abs(r)
        return np.where(a <= self.delta, 0.5 * r * r, self.delta * (a - 0.5 * self.delta))

    def rho_prime(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "squared":
            return r
        return np.clip(r, -self.delta, self.delta)

    def rho_dprime(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "squared":
            return np.ones_like(r)
        return (np.abs(r) <= self.delta).astype(float)


@dataclass(frozen=True)
class NaturalParamModel:
    """A likelihood that depends on ``theta`` only through ``x @ theta``.

    Attributes
    ----------
    kind : str
        One of ``"normal"``, ``"poisson"``, ``"logistic"``, ``"mloss"`` or a
        free-form tag for ad-hoc adapters (tests, Cox steps).
    ell_prime : callable
        ``(eta, y) -> d ell / d eta``; must be nonincreasing in ``eta``.
    ell_dprime : callable, optional
        Second derivative (``<= 0``).
    transfer_h, transfer_h_prime : callable, optional
        Mean function of a GLM and its derivative.
    lipschitz_L0 : float, optional
        Bound on ``|ell_prime|`` when one exists.
    loss : RobustLoss, optional
        The loss an ``"mloss"`` adapter was built from.
    """

    kind: str
    ell_prime: Callable
    ell_dprime: Optional[Callable] = None
    transfer_h: Optional[Callable] = None
    transfer_h_prime: Optional[Callable] = None
    lipschitz_L0: Optional[float] = None
    loss: Optional[RobustLoss] = None

    @property
    def is_glm(self) -> bool:
        return self.transfer_h is not None

    @property
    def has_linear_score(self) -> bool:
        # ell'(eta; y) = y - eta: the implicit update has a closed form.
        return self.kind == "normal" or (
            self.kind == "mloss" and self.loss is not None and self.loss.kind == "squared"
        )

    def score(self, x, y, theta):
        """Gradient of the log-likelihood, ``ell'(x @ theta; y) * x``."""
        x = np.asarray(x, dtype=float)
        return float(self.ell_prime(x @ np.asarray(theta, dtype=float), y)) * x


def _poisson_h(eta):
    eta = np.asarray(eta, dtype=float)
    out = np.exp(np.minimum(eta, POISSON_ETA_MAX))
    return np.where(eta > POISSON_ETA_MAX, np.inf, out)


def _sigmoid(eta):
    eta = np.asarray(eta, dtype=float)
    # split on sign so neither branch overflows
    e = np.exp(-np.abs(eta))
    return np.where(eta >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid_prime(eta):
    s = _sigmoid(eta)
    return s * (1.0 - s)


def _identity(eta):
    return np.asarray(eta, dtype=float)


def _one(eta):
    return np.ones_like(np.asarray(eta, dtype=float))


# callables are module-level classes rather than closures so that models
# pickle, which process-based parallel runs need

@dataclass(frozen=True)
class _GlmScore:
    h: Callable

    def __call__(self, eta, y):
        return np.asarray(y, dtype=float) - self.h(eta)


@dataclass(frozen=True)
class _GlmCurvature:
    h_prime: Callable

    def __call__(self, eta, y):
        return -self.h_prime(eta)


def _glm(kind, h, h_prime, lipschitz=None):
    return NaturalParamModel(
        kind=kind,
        ell_prime=_GlmScore(h),
        ell_dprime=_GlmCurvature(h_prime),
        transfer_h=h,
        transfer_h_prime=h_prime,
        lipschitz_L0=lipschitz,
    )


def normal() -> NaturalParamModel:
    return _glm("normal", _identity, _one)


def poisson() -> NaturalParamModel:
    return _glm("poisson", _poisson_h, _poisson_h)


def logistic() -> NaturalParamModel:
    return _glm("logistic", _sigmoid, _sigmoid_prime, lipschitz=1.0)


@dataclass(frozen=True)
class _ResidualScore:
    loss: RobustLoss

    def __call__(self, eta, y):
        return self.loss.rho_prime(np.asarray(y, dtype=float) - eta)


@dataclass(frozen=True)
class _ResidualCurvature:
    loss: RobustLoss

    def __call__(self, eta, y):
        return -self.loss.rho_dprime(np.asarray(y, dtype=float) - eta)


def mloss_as_model(loss: RobustLoss) -> NaturalParamModel:
    """Wrap a convex residual loss as a concave natural-parameter model.

    ``ell'(eta; y) = rho'(y - eta)``, so ``ell'' = -rho'' <= 0``.
    """
    return NaturalParamModel(
        kind="mloss",
        ell_prime=_ResidualScore(loss),
        ell_dprime=_ResidualCurvature(loss),
        lipschitz_L0=loss.delta if loss.kind == "huber" else None,
        loss=loss,
    )


def huber(delta: float = HUBER_DEFAULT_DELTA) -> NaturalParamModel:
    return mloss_as_model(RobustLoss("huber", delta))


def squared() -> NaturalParamModel:
    return mloss_as_model(RobustLoss("squared"))


def from_token(token: str) -> NaturalParamModel:
    """Parse ``normal``, ``poisson``, ``logistic``, ``squared`` or ``huber[:delta]``."""
    token = token.strip().lower()
    simple = {"normal": normal, "poisson": poisson, "logistic": logistic, "squared": squared}
    if token in simple:
        return simple[token]()
    if token == "huber":
        return huber()
    if token.startswith("huber:"):
        try:
            delta = float(token.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad huber delta in model token {token!r}") from None
        return huber(delta)
    raise ValueError(f"unknown model token {token!r}")


def glm_score(model: NaturalParamModel, obs: Observation, theta) -> np.ndarray:
    """``[y - h(x @ theta)] x``.  Non-finite under Poisson overflow; not clamped."""
    if not model.is_glm:
        raise ValueError(f"glm_score needs a GLM model, got kind {model.kind!r}")
    x = np.asarray(obs.x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if x.shape != theta.shape:
        raise ValueError(f"dimension mismatch: x {x.shape} vs theta {theta.shape}")
    resid = float(obs.y) - float(model.transfer_h(x @ theta))
    return resid * x


def ell_prime_monotone_check(model: NaturalParamModel, y, eta_grid) -> bool:
    """True iff ``ell'(eta; y)`` is nonincreasing along a strictly increasing grid."""
    eta_grid = np.asarray(eta_grid, dtype=float)
    if np.any(np.diff(eta_grid) <= 0):
        raise ValueError("eta_grid must be strictly increasing")
    vals = np.asarray(model.ell_prime(eta_grid, y), dtype=float)
    return bool(np.all(np.diff(vals) <= 0))
