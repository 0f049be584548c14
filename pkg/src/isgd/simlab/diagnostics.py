"""Monte Carlo diagnostics: variances, chi-squared checks, MSE quantiles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special, stats

from ..data import fmt

DEFAULT_QUANTILES = (0.05, 0.5, 0.95)


def empirical_variance(final_iterates) -> np.ndarray:
    """Unbiased sample covariance of replicated final iterates (rows)."""
    a = np.atleast_2d(np.asarray(final_iterates, dtype=float))
    if a.shape[0] == 1 and np.ndim(final_iterates) == 1:
        a = a.T
    if a.shape[0] < 2:
        raise ValueError("need at least two replications")
    c = a - a.mean(axis=0)
    v = c.T @ c / (a.shape[0] - 1)
    return 0.5 * (v + v.T)


def chisq_statistic(theta_hat, theta_star, sigma, n_iters) -> float:
    """``n (theta_hat - theta_star)' sigma^{-1} (theta_hat - theta_star)``."""
    d = np.atleast_1d(np.asarray(theta_hat, dtype=float) - np.asarray(theta_star, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    try:
        cho = np.linalg.cholesky(0.5 * (sigma + sigma.T))
    except np.linalg.LinAlgError:
        raise ValueError("sigma must be positive definite") from None
    z = np.linalg.solve(cho, d)
    return float(n_iters * z @ z)


def chisq_cdf(x, dof):
    """Chi-squared CDF via the regularized lower incomplete gamma function."""
    x = np.asarray(x, dtype=float)
    return special.gammainc(0.5 * dof, np.maximum(x, 0.0) / 2.0)


def ks_against_chisq(samples, dof):
    """One-sample Kolmogorov-Smirnov test against chi-squared(dof): ``(D, pvalue)``."""
    samples = np.asarray(samples, dtype=float).reshape(-1)
    if samples.size == 0:
        raise ValueError("no samples")
    if dof < 1:
        raise ValueError("dof must be at least 1")
    res = stats.kstest(samples, lambda x: chisq_cdf(x, dof), method="asymp")
    return float(res.statistic), float(res.pvalue)


def mse_quantile_curves(trajectories, theta_star, quantiles=DEFAULT_QUANTILES):
    """Per-iteration quantiles of ``||theta_n - theta_star||^2``.

    ``trajectories`` has shape ``(reps, n_iter, p)``; returns a dict mapping
    each quantile to a length ``n_iter`` array.
    """
    t = np.asarray(trajectories, dtype=float)
    if t.ndim == 2:
        t = t[None]
    mse = np.sum((t - np.asarray(theta_star, dtype=float)) ** 2, axis=-1)
    return quantiles_of(mse, quantiles)


def quantiles_of(mse, quantiles=DEFAULT_QUANTILES):
    """Quantiles over replications of an ``(reps, n_iter)`` MSE array."""
    mse = np.atleast_2d(np.asarray(mse, dtype=float))
    return {q: np.quantile(mse, q, axis=0) for q in quantiles}


@dataclass
class DiagnosticReport:
    empirical_variance: np.ndarray | None = None
    theoretical_variance: np.ndarray | None = None
    chisq_samples: np.ndarray | None = None
    ks_statistic: float | None = None
    ks_pvalue: float | None = None
    mse_quantiles: dict = field(default_factory=dict)

    def to_csv_blocks(self) -> str:
        """Plain-text CSV blocks separated by ``# name`` lines."""
        out = []
        for name in ("empirical_variance", "theoretical_variance"):
            m = getattr(self, name)
            if m is not None:
                out.append(f"# {name}")
                out.extend(",".join(fmt(v) for v in row) for row in np.atleast_2d(m))
        if self.chisq_samples is not None:
            out.append("# chisq_samples")
            out.extend(fmt(v) for v in self.chisq_samples)
        if self.mse_quantiles:
            qs = sorted(self.mse_quantiles)
            out.append("# mse_quantiles")
            out.append(",".join(["iter"] + [f"q{q:g}" for q in qs]))
            for i, row in enumerate(zip(*(self.mse_quantiles[q] for q in qs)), start=1):
                out.append(",".join([str(i)] + [fmt(v) for v in row]))
        return "\n".join(out) + "\n"

    def summary(self) -> dict:
        s = {}
        if self.empirical_variance is not None:
            s["empirical_trace"] = float(np.trace(self.empirical_variance))
        if self.theoretical_variance is not None:
            s["theoretical_trace"] = float(np.trace(self.theoretical_variance))
        if self.ks_statistic is not None:
            s["ks_statistic"] = self.ks_statistic
            s["ks_pvalue"] = self.ks_pvalue
        if self.chisq_samples is not None:
            s["chisq_mean"] = float(np.mean(self.chisq_samples))
        return s

    def write(self, directory, stem="diagnostics"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.csv").write_text(self.to_csv_blocks())
        (directory / f"{stem}.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
