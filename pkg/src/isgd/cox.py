"""Cox proportional hazards by explicit and implicit SGD.

Risk sets are ``R_j = {j, ..., N-1}`` on time-sorted data, so

    H_i(theta) = sum_{j <= i} d_j / sum_{k >= j} exp(x_k @ theta)

is a prefix sum of ``d / (suffix sums of eta)`` and costs O(N).

The implicit step freezes ``H_i`` at the previous iterate; what remains,
``d_i - H_i exp(eta)``, is decreasing in ``eta`` and goes through the generic
fixed-point solver.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import SurvivalDataset
from .engine import (
    DivergenceError,
    FitResult,
    LearningRate,
    SgdConfig,
    SgdState,
    conditioned_direction,
    step_size,
    fixed_point_batch,
    n_iterations,
    resolve_conditioner,
    run_loop,
    sample_indices,
)

ETA_MAX = 700.0


@dataclass(frozen=True)
class HazardTerms:
    eta: np.ndarray      # exp(x_i @ theta)
    cum_eta: np.ndarray  # sum_{k >= j} eta_k
    H: np.ndarray
    finite: bool = True


def compute_hazard_terms(dataset: SurvivalDataset, theta) -> HazardTerms:
    lin = dataset.X @ np.asarray(theta, dtype=float)
    finite = bool(np.all(lin <= ETA_MAX))
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        eta = np.where(lin > ETA_MAX, np.inf, np.exp(np.minimum(lin, ETA_MAX)))
        cum_eta = np.cumsum(eta[::-1])[::-1]
        H = np.cumsum(dataset.status / cum_eta)
    return HazardTerms(eta, cum_eta, H, finite and bool(np.all(np.isfinite(H))))


def partial_loglik(dataset: SurvivalDataset, theta) -> float:
    """Log partial likelihood ``sum_i d_i [x_i @ theta - log sum_{k >= i} eta_k]``."""
    lin = dataset.X @ np.asarray(theta, dtype=float)
    m = lin.max()
    log_cum = np.log(np.cumsum(np.exp(lin - m)[::-1])[::-1]) + m
    return float(np.sum(dataset.status * (lin - log_cum)))


def cox_score(dataset: SurvivalDataset, theta) -> np.ndarray:
    """Full-data gradient ``sum_i [d_i - H_i eta_i] x_i``."""
    ht = compute_hazard_terms(dataset, theta)
    return (dataset.status - ht.H * ht.eta) @ dataset.X


def cox_information(dataset: SurvivalDataset, theta) -> np.ndarray:
    """Observed information ``-d^2/dtheta^2`` of the log partial likelihood.

    ``sum_i d_i [S2_i / S0_i - m_i m_i^T]`` with ``S_k`` suffix sums of
    ``eta x^{(k)}`` over the risk set and ``m_i = S1_i / S0_i``.
    """
    X = dataset.X
    lin = X @ np.asarray(theta, dtype=float)
    w = np.exp(lin - lin.max())
    S0 = np.cumsum(w[::-1])[::-1]
    S1 = np.cumsum((w[:, None] * X)[::-1], axis=0)[::-1]
    S2 = np.cumsum((w[:, None, None] * X[:, :, None] * X[:, None, :])[::-1], axis=0)[::-1]
    ev = dataset.status > 0
    m = S1[ev] / S0[ev, None]
    info = np.sum(S2[ev] / S0[ev, None, None], axis=0) - m.T @ m
    return 0.5 * (info + info.T)


def _weight(dataset, theta, i):
    ht = compute_hazard_terms(dataset, theta)
    with np.errstate(invalid="ignore", over="ignore"):
        w = dataset.status[i] - ht.H[i] * ht.eta[i]
    return w, ht


def cox_explicit_step(state: SgdState, dataset: SurvivalDataset, rate: LearningRate,
                      i: int) -> SgdState:
    x = dataset.X[i]
    n = state.n + 1
    w, _ = _weight(dataset, state.theta, i)
    if not np.isfinite(w):
        raise DivergenceError(f"non-finite Cox weight at step {n}", state.theta, state.n)
    theta = state.theta + step_size(rate, n, x) * w * conditioned_direction(state.conditioner, x)
    return dataclasses.replace(state, theta=theta, n=n)


def cox_implicit_step(state: SgdState, dataset: SurvivalDataset, rate: LearningRate,
                      i: int) -> SgdState:
    x = dataset.X[i]
    n = state.n + 1
    direction = conditioned_direction(state.conditioner, x)
    w, ht = _weight(dataset, state.theta, i)
    if not np.isfinite(w):
        raise DivergenceError(f"non-finite Cox weight at step {n}", state.theta, state.n)
    H_i = ht.H[i]
    gamma = step_size(rate, n, x)
    xi, r = fixed_point_batch(lambda eta, d: d - H_i * np.exp(eta),
                              float(x @ state.theta), dataset.status[i], gamma,
                              state.conditioner.quad(x))
    xi, r = float(xi), float(r)
    lam = 1.0 if r == 0.0 else xi / r
    history = state.lambda_history
    if history is not None:
        history = history + [lam]
    return dataclasses.replace(state, theta=state.theta + xi * direction, n=n,
                               lambda_history=history)


def _averaging(step):
    def wrapped(state, dataset, rate, i):
        new = step(state, dataset, rate, i)
        avg = ((new.n - 1) * state.avg_theta + new.theta) / new.n
        return dataclasses.replace(new, avg_theta=avg)
    return wrapped


COX_STEPS = {
    "explicit": cox_explicit_step,
    "implicit": cox_implicit_step,
    "explicit_avg": _averaging(cox_explicit_step),
    "implicit_avg": _averaging(cox_implicit_step),
}


def cox_fit(dataset: SurvivalDataset, config: SgdConfig) -> FitResult:
    """SGD on the Cox partial likelihood, one uniformly sampled unit per step.

    ``H`` is recomputed at the current iterate on every step.
    """
    if config.method not in COX_STEPS:
        raise ValueError(f"Cox fitting supports {sorted(COX_STEPS)}, not {config.method!r}")
    cond = resolve_conditioner(config, dataset.p)
    n_iter = n_iterations(config, dataset.n)
    idx = sample_indices(config, dataset.n, n_iter)
    theta0 = np.zeros(dataset.p) if config.theta0 is None else config.theta0
    state = SgdState.initial(theta0, cond, config.track_lambda)
    step = COX_STEPS[config.method]
    return run_loop(state, n_iter, config, lambda s, k: step(s, dataset, config.rate, idx[k]))
