"""Closed-form asymptotic variances, learning-rate tuning and stability gains.

Conventions: ``sigma`` is the limit of ``n * Var(theta_n)`` (``rate_tag``
``"1/n"``) or of ``sqrt(n) * Var(theta_n)`` (``"1/sqrt(n)"``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .data import Dataset
from .linalg import golden_section, jacobi_eigh
from .models import NaturalParamModel

ONE_OVER_N = "1/n"
ONE_OVER_SQRT_N = "1/sqrt(n)"
COMMUTE_TOL = 1e-8


class AssumptionError(ValueError):
    """Inputs violate a structural assumption (commutation, invertibility)."""


@dataclass(frozen=True, eq=False)
class FisherInfo:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    source: str = "analytic"
    n_samples: Optional[int] = None

    @classmethod
    def from_matrix(cls, F, source="analytic", n_samples=None):
        F = np.atleast_2d(np.asarray(F, dtype=float))
        if F.shape[0] != F.shape[1] or not np.allclose(F, F.T, rtol=0, atol=1e-10):
            raise ValueError("Fisher information must be a symmetric matrix")
        F = 0.5 * (F + F.T)
        w, _ = jacobi_eigh(F)
        return cls(F, w, source, n_samples)


@dataclass(frozen=True, eq=False)
class AsympVariance:
    sigma: Optional[np.ndarray]
    valid: bool
    rate_tag: str = ONE_OVER_N
    min_eig: Optional[float] = None  # of the matrix whose definiteness decides validity


def _as_matrix(F):
    if isinstance(F, FisherInfo):
        return F.matrix
    return np.atleast_2d(np.asarray(F, dtype=float))


def _check_commute(C, F):
    tol = COMMUTE_TOL * np.linalg.norm(C) * np.linalg.norm(F)
    if np.linalg.norm(C @ F - F @ C) > tol:
        raise AssumptionError("conditioner and Fisher information do not commute")


def _sandwich_variance(scale, gain, C, F):
    """``scale * (2 gain C F - I)^{-1} C F C``, or an invalid result."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if not np.allclose(C, C.T, rtol=0, atol=1e-10):
        raise AssumptionError("conditioner must be symmetric")
    if np.linalg.eigvalsh(0.5 * (C + C.T)).min() <= 0:
        raise AssumptionError("conditioner must be positive definite")
    _check_commute(C, F)
    CF = C @ F
    A = 2.0 * gain * CF - np.eye(F.shape[0])
    # C and F commute, so CF (hence A) is symmetric
    min_eig = float(jacobi_eigh(0.5 * (A + A.T))[0][-1])
    if min_eig <= 0:
        return AsympVariance(None, False, ONE_OVER_N, min_eig)
    sigma = scale * np.linalg.solve(A, CF @ C)
    return AsympVariance(0.5 * (sigma + sigma.T), True, ONE_OVER_N, min_eig)


def sgd_variance(F, C, gamma1) -> AsympVariance:
    """Limit of ``n Var`` for explicit or implicit SGD with ``gamma_n = gamma1 / n``.

    ``gamma1^2 (2 gamma1 C F - I)^{-1} C F C``; flagged invalid (no matrix)
    when ``2 gamma1 C F - I`` is not positive definite.
    """
    F = _as_matrix(F)
    return _sandwich_variance(gamma1 ** 2, gamma1, C, F)


theorem2_variance = sgd_variance  # older public name


def averaged_variance(F) -> AsympVariance:
    F = _as_matrix(F)
    try:
        inv = np.linalg.inv(F)
    except np.linalg.LinAlgError:
        raise AssumptionError("Fisher information is singular") from None
    if not np.all(np.isfinite(inv)) or np.linalg.cond(F) > 1e14:
        raise AssumptionError("Fisher information is singular")
    return AsympVariance(0.5 * (inv + inv.T), True, ONE_OVER_N)


def adagrad_variance(F, gamma1) -> AsympVariance:
    """``(gamma1 / 2) diag(F)^{-1/2}``, the limit of ``sqrt(n) Var`` for AdaGrad."""
    d = np.diag(_as_matrix(F)).copy()
    if np.any(d <= 0):
        raise AssumptionError("diagonal of the Fisher information must be positive")
    return AsympVariance(np.diag(0.5 * gamma1 / np.sqrt(d)), True, ONE_OVER_SQRT_N)


def mest_variance(S, C, psi2, vprime0) -> AsympVariance:
    """``psi2 (2 v'(0) C S - I)^{-1} C S C`` for implicit SGD M-estimation.

    ``C`` carries the learning-rate constant (``C = gamma1 I`` for first order).
    """
    S = _as_matrix(S)
    if np.linalg.eigvalsh(S).min() <= 0:
        raise AssumptionError("S must be positive definite")
    return _sandwich_variance(psi2, vprime0, C, S)


def huber_moments(delta: float, noise_sd: float = 1.0):
    """``(psi2, vprime0)`` of the Huber score under ``N(0, noise_sd^2)`` errors.

    ``psi2 = E[rho'(e)^2]`` and ``vprime0 = P(|e| < delta)``, the slope at zero
    of ``v(t) = -E[rho'(e - t)]``.
    """
    if not delta > 0 or not noise_sd > 0:
        raise ValueError("delta and noise_sd must be positive")
    z = delta / noise_sd
    Phi = 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))
    phi = math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    inner = 2.0 * Phi - 1.0
    psi2 = noise_sd ** 2 * (inner - 2.0 * z * phi) + 2.0 * delta ** 2 * (1.0 - Phi)
    return psi2, inner


def optimal_rate_objective(x, eigenvalues):
    lam = np.asarray(eigenvalues, dtype=float)
    return float(np.sum(x * x * lam / (2.0 * x * lam - 1.0)))


def optimal_rate_derivative(x, eigenvalues):
    """``d/dx`` of :func:`optimal_rate_objective`: ``sum 2 l x (x l - 1) / (2 x l - 1)^2``."""
    lam = np.asarray(eigenvalues, dtype=float)
    return float(np.sum(2.0 * lam * x * (x * lam - 1.0) / (2.0 * x * lam - 1.0) ** 2))


def optimal_gamma1(eigenvalues) -> float:
    """Minimize ``sum_i x^2 l_i / (2 x l_i - 1)`` over ``x > 1 / (2 min l_i)``.

    Each term is convex on the feasible half-line, so golden-section search on
    ``[1/(2 l_min) + eps, 10 / l_min]`` finds the basin; the minimizer never
    exceeds ``1 / l_min``.  Golden section only resolves a flat minimum to
    about ``sqrt(machine eps)`` relative, so the result is polished by
    bisecting the (increasing) derivative near the golden-section answer.
    """
    lam = np.asarray(eigenvalues, dtype=float).reshape(-1)
    if lam.size == 0:
        raise ValueError("need at least one eigenvalue")
    if np.any(lam <= 0):
        raise ValueError("eigenvalues must be positive")
    lmin = lam.min()
    lo = 1.0 / (2.0 * lmin)
    lo += 1e-9 * lo
    x = golden_section(lambda t: optimal_rate_objective(t, lam), lo, 10.0 / lmin, tol=1e-10)
    a, b = max(lo, x * (1.0 - 1e-5)), x * (1.0 + 1e-5)
    if optimal_rate_derivative(a, lam) > 0 or optimal_rate_derivative(b, lam) < 0:
        return x
    for _ in range(200):
        mid = 0.5 * (a + b)
        if mid <= a or mid >= b:
            break
        if optimal_rate_derivative(mid, lam) > 0:
            b = mid
        else:
            a = mid
    return 0.5 * (a + b)


def stability_max_gain(b: float) -> float:
    """``max_n |prod_{i<=n} (1 - b/i)|`` for ``b > 0``.

    Factors have modulus at least one while ``i <= b/2`` and below one after,
    so the running product peaks by ``i = floor(b/2) + 1``.  Exact rational
    arithmetic for moderate ``b``; even integers give ``binom(b, b/2) / 2``.
    """
    if not b > 0:
        raise ValueError("b must be positive")
    last = int(math.floor(b / 2.0)) + 1
    if b <= 400:
        fb = Fraction(b)
        prod, best = Fraction(1), Fraction(0)
        for i in range(1, last + 1):
            prod *= abs(1 - fb / i)
            best = max(best, prod)
        return float(best)
    log_prod, best = 0.0, -math.inf
    for i in range(1, last + 1):
        f = abs(1.0 - b / i)
        if f == 0.0:
            break
        log_prod += math.log(f)
        best = max(best, log_prod)
    return math.exp(best)


def stability_gain_asymptotic(b: float) -> float:
    """Large-``b`` approximation ``2^b / sqrt(2 pi b)`` of :func:`stability_max_gain`."""
    return 2.0 ** b / math.sqrt(2.0 * math.pi * b)


def implicit_gain_bounded(b: float, n_max: int) -> float:
    """``max_{n <= n_max} prod_{i<=n} (1 + b/i)^{-1}``; never above one."""
    if not b > 0:
        raise ValueError("b must be positive")
    prod, best = 1.0, 0.0
    for i in range(1, int(n_max) + 1):
        prod /= 1.0 + b / i
        best = max(best, prod)
    return best


def empirical_fisher(dataset: Dataset, model: NaturalParamModel, theta) -> FisherInfo:
    """``(1/N) sum_i h'(x_i @ theta) x_i x_i^T`` for a GLM."""
    if model.transfer_h_prime is None:
        raise ValueError(f"model kind {model.kind!r} has no transfer derivative")
    if dataset.n == 0:
        raise ValueError("empty dataset")
    w = np.asarray(model.transfer_h_prime(dataset.X @ np.asarray(theta, dtype=float)), dtype=float)
    if not np.all(np.isfinite(w)):
        raise ArithmeticError("non-finite transfer derivative")
    F = (dataset.X * w[:, None]).T @ dataset.X / dataset.n
    return FisherInfo.from_matrix(0.5 * (F + F.T), source="empirical", n_samples=dataset.n)
