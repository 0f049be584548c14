"""Simulation designs.

Each design is an immutable description with a ``sample(rng, n)`` method.
The ``gen_*`` helpers bind a design to a seed so that the same
``(design, seed)`` always produces the same data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..data import Dataset, SurvivalDataset
from .rng import stream


@dataclass(frozen=True, eq=False)
class NormalLinear:
    """``x ~ N(0, diag(s))``, ``y | x ~ N(x @ theta_star, noise_sd^2)``."""

    s_diag: np.ndarray
    theta_star: np.ndarray
    noise_sd: float = 1.0

    def __post_init__(self):
        s = np.asarray(self.s_diag, dtype=float).reshape(-1)
        t = np.asarray(self.theta_star, dtype=float).reshape(-1)
        if s.shape != t.shape:
            raise ValueError("s_diag and theta_star must have the same length")
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("covariate variances must be positive and finite")
        object.__setattr__(self, "s_diag", s)
        object.__setattr__(self, "theta_star", t)

    @classmethod
    def uniform_spectrum(cls, p=20, seed=0, low=0.5, high=5.0, theta_star=None):
        """Covariance eigenvalues drawn once, uniformly in ``[low, high]``."""
        s = stream(seed, "design", "spectrum").uniform(low, high, size=p)
        return cls(s, np.ones(p) if theta_star is None else theta_star)

    @property
    def p(self):
        return self.s_diag.size

    @property
    def fisher(self):
        return np.diag(self.s_diag) / self.noise_sd ** 2

    def sample(self, rng, n):
        X = rng.standard_normal((n, self.p)) * np.sqrt(self.s_diag)
        y = X @ self.theta_star + self.noise_sd * rng.standard_normal(n)
        return Dataset(X, y)


@dataclass(frozen=True, eq=False)
class PoissonBivariate:
    """Binary covariates ``(0,0), (1,0), (0,1)``; ``y ~ Poisson(exp(x @ theta_star))``."""

    theta_star: np.ndarray = field(default_factory=lambda: np.array([math.log(2.0), math.log(4.0)]))
    probs: tuple = (0.6, 0.2, 0.2)

    SUPPORT = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

    @property
    def p(self):
        return 2

    @property
    def fisher(self):
        return np.diag(np.asarray(self.probs[1:]) * np.exp(self.theta_star))

    def sample(self, rng, n):
        k = rng.choice(3, size=n, p=self.probs)
        X = self.SUPPORT[k]
        y = rng.poisson(np.exp(X @ self.theta_star)).astype(float)
        return Dataset(X, y)


def glmnet_theta(p):
    j = np.arange(1, p + 1)
    return (-1.0) ** j * np.exp(-2.0 * (j - 1) / 20.0)


@dataclass(frozen=True, eq=False)
class GlmnetCorrelated:
    """Equicorrelated Gaussian design ``x ~ N(0, b^2 U + I)``, ``b = sqrt(rho / (1 - rho))``.

    Noise sd is set so that ``sqrt(theta' Sigma theta) / sd == snr``.
    """

    p: int
    rho: float = 0.0
    snr: float = 3.0

    def __post_init__(self):
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if not self.snr > 0:
            raise ValueError("snr must be positive")

    @property
    def theta_star(self):
        return glmnet_theta(self.p)

    @property
    def covariance(self):
        b2 = self.rho / (1.0 - self.rho)
        return b2 * np.ones((self.p, self.p)) + np.eye(self.p)

    @property
    def noise_sd(self):
        t = self.theta_star
        return math.sqrt(t @ self.covariance @ t) / self.snr

    def sample(self, rng, n):
        b = math.sqrt(self.rho / (1.0 - self.rho))
        # b * z0 * 1' + Z has covariance b^2 U + I
        X = rng.standard_normal((n, self.p)) + b * rng.standard_normal((n, 1))
        y = X @ self.theta_star + self.noise_sd * rng.standard_normal(n)
        return Dataset(X, y)


def cox_theta(p):
    k = np.arange(1, p + 1)
    return 2.0 * (-1.0) ** k * np.exp(-0.1 * k)


def censor_slope(times, b, min_prob):
    """Slope ``a`` so the smallest time is censored with probability ``min_prob``.

    Solves ``1 / (1 + exp(-a (min(times) - b))) = min_prob``.
    """
    gap = b - float(np.min(times))
    if gap <= 0:
        raise ValueError("censoring midpoint must exceed the smallest time")
    return math.log((1.0 - min_prob) / min_prob) / gap


@dataclass(frozen=True, eq=False)
class CoxExponential:
    """Exponential survival with rate ``exp(x @ theta_star)``, ``x ~ N(0, 0.2 U + I)``.

    Unit ``i`` is censored with probability ``1 / (1 + exp(-a (y_i - b)))``,
    ``b`` the ``censor_quantile`` of the sampled times and ``a`` from
    :func:`censor_slope`.  ``censor=False`` disables censoring.
    """

    p: int = 20
    censor_quantile: float = 0.8
    censor_min_prob: float = 0.001
    censor: bool = True
    correlation: float = 0.2

    @property
    def theta_star(self):
        return cox_theta(self.p)

    def sample(self, rng, n) -> SurvivalDataset:
        c = math.sqrt(self.correlation)
        X = rng.standard_normal((n, self.p)) + c * rng.standard_normal((n, 1))
        rate = np.exp(X @ self.theta_star)
        t = rng.exponential(1.0 / rate)
        u = rng.uniform(size=n)
        if self.censor:
            b = float(np.quantile(t, self.censor_quantile))
            a = censor_slope(t, b, self.censor_min_prob)
            prob = 1.0 / (1.0 + np.exp(-a * (t - b)))
            status = (u >= prob).astype(float)
        else:
            status = np.ones(n)
        return SurvivalDataset.from_unsorted(X, t, status)


@dataclass(frozen=True, eq=False)
class ContaminatedLinear:
    """``x ~ N(0, I / n_scale)``; ``y = x @ theta_star + N(0, 1)``, replaced by
    ``outlier_value`` with probability ``contamination_rate``."""

    theta_star: np.ndarray
    n_scale: int = 1000
    contamination_rate: float = 0.05
    outlier_value: float = 10.0

    def __post_init__(self):
        if not 0 <= self.contamination_rate <= 1:
            raise ValueError("contamination_rate must lie in [0, 1]")
        object.__setattr__(self, "theta_star", np.asarray(self.theta_star, dtype=float).reshape(-1))

    @classmethod
    def random_theta(cls, p=200, seed=0, n_scale=1000, **kw):
        """``theta_star`` uniform on the sphere of radius ``6 sqrt(p)``."""
        v = stream(seed, "design", "theta").standard_normal(p)
        return cls(6.0 * math.sqrt(p) * v / np.linalg.norm(v), n_scale, **kw)

    @property
    def p(self):
        return self.theta_star.size

    def sample(self, rng, n):
        X = rng.standard_normal((n, self.p)) / math.sqrt(self.n_scale)
        y = X @ self.theta_star + rng.standard_normal(n)
        out = rng.uniform(size=n) < self.contamination_rate
        y = np.where(out, self.outlier_value, y)
        return Dataset(X, y)


def gen_normal_linear(design: NormalLinear, n: int, seed: int) -> Dataset:
    return design.sample(stream(seed, "data"), n)


def gen_poisson_bivariate(seed: int, n: int, design: Optional[PoissonBivariate] = None) -> Dataset:
    return (design or PoissonBivariate()).sample(stream(seed, "data"), n)


def gen_glmnet(design: GlmnetCorrelated, n: int, seed: int) -> Dataset:
    return design.sample(stream(seed, "data"), n)


def gen_cox(design: CoxExponential, n: int, seed: int) -> SurvivalDataset:
    return design.sample(stream(seed, "data"), n)


def gen_contaminated(design: ContaminatedLinear, n: int, seed: int) -> Dataset:
    return design.sample(stream(seed, "data"), n)
