"""Run many independent SGD replications in lock-step.

The recursion is serial in ``n`` but replications are independent, so the
state is an ``(R, p)`` array and every step is vectorized over ``R``.  Each
replication still draws from its own substream (``stream(seed, "rep", r)``),
which keeps results identical to running the replications one by one with
:func:`isgd.engine.fit` (the test suite checks this).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..cox import ETA_MAX
from ..data import SurvivalDataset
from ..engine import BLOWUP_THRESHOLD, LearningRate, fixed_point_batch
from ..models import NaturalParamModel
from .rng import derived_seed, stream

BATCH_METHODS = ("explicit", "implicit", "explicit_avg", "implicit_avg", "adagrad")
LAMBDA_SLACK = 1e-12


class InvariantError(AssertionError):
    pass


@dataclass
class BatchResult:
    theta: np.ndarray        # (R, p) final (or last finite) iterates
    avg_theta: np.ndarray    # (R, p) running means
    diverged: np.ndarray     # (R,) bool
    diverged_at: np.ndarray  # (R,) step index of divergence, -1 if none
    n_iter: int
    lambda_min: float = 1.0
    lambda_max: float = 1.0
    mse: Optional[np.ndarray] = None        # (R, n_records) squared errors
    record_iters: Optional[np.ndarray] = None
    adagrad_accum: Optional[np.ndarray] = None  # (R, p) summed squared gradients

    @property
    def diverged_fraction(self) -> float:
        return float(np.mean(self.diverged))


class _Runner:
    """Shared per-step logic for stream and finite-data batches."""

    def __init__(self, method, rate, theta0, blowup, adagrad_eps, closed_form, rate_scale=None):
        if method not in BATCH_METHODS:
            raise ValueError(f"batched runs support {BATCH_METHODS}, not {method!r}")
        if method == "adagrad" and rate.mode != "constant":
            raise ValueError("AdaGrad uses a constant learning rate")
        self.method = method
        self.rate = rate
        self.theta = np.array(theta0, dtype=float)
        self.avg = self.theta.copy()
        self.accum = np.zeros_like(self.theta)
        self.diverged = np.zeros(self.theta.shape[0], dtype=bool)
        self.diverged_at = np.full(self.theta.shape[0], -1)
        self.blowup = blowup
        self.eps = adagrad_eps
        self.closed_form = closed_form
        self.lam_min, self.lam_max = 1.0, 1.0
        self.n = 0
        # optional per-replication multiplier on the learning rate
        self.scale = None if rate_scale is None else np.broadcast_to(
            np.asarray(rate_scale, dtype=float), self.theta.shape[:1])

    @property
    def implicit(self):
        return self.method.startswith("implicit")

    def step(self, x, y, ell_prime: Callable):
        """Advance all live replications by one observation each.

        ``x`` is ``(R, p)``, ``y`` is ``(R,)``; ``ell_prime(eta, y, live)``
        evaluates the score derivative for the replications selected by the
        boolean mask ``live``.
        """
        self.n += 1
        n = self.n
        live = ~self.diverged
        if not live.any():
            return
        th = self.theta[live]
        xl, yl = x[live], y[live]
        sq = np.einsum("rp,rp->r", xl, xl)
        gamma = self.rate(n, sq) if self.rate.mode == "safeguard" else self.rate(n)
        if self.scale is not None:
            gamma = gamma * self.scale[live]
        eta = np.einsum("rp,rp->r", xl, th)
        ep = lambda e, yy: ell_prime(e, yy, live)  # noqa: E731
        with np.errstate(over="ignore", invalid="ignore"):
            if self.implicit:
                new, bad = self._implicit(th, xl, yl, eta, gamma, sq, ep)
            else:
                s = ep(eta, yl)
                bad = ~np.isfinite(s)
                s = np.where(bad, 0.0, s)
                g = s[:, None] * xl
                if self.method == "adagrad":
                    acc = self.accum[live] + g * g
                    upd = np.zeros_like(g)
                    nz = g != 0
                    g1 = np.broadcast_to(np.asarray(gamma, dtype=float)[..., None], g.shape)
                    upd[nz] = g1[nz] * g[nz] / (np.sqrt(acc[nz]) + self.eps)
                    self.accum[live] = acc
                    new = th + upd
                else:
                    new = th + np.asarray(gamma)[..., None] * g if np.ndim(gamma) else th + gamma * g
            bad |= ~np.all(np.isfinite(new), axis=1) | (np.max(np.abs(new), axis=1) > self.blowup)
        new = np.where(bad[:, None], th, new)
        self.theta[live] = new
        idx = np.flatnonzero(live)
        self.diverged[idx[bad]] = True
        self.diverged_at[idx[bad]] = n
        # diverged replications keep their running mean frozen as well
        ok = idx[~bad]
        self.avg[ok] += (self.theta[ok] - self.avg[ok]) / n

    def _implicit(self, th, xl, yl, eta, gamma, sq, ep):
        gamma = np.broadcast_to(np.asarray(gamma, dtype=float), eta.shape)
        r = gamma * ep(eta, yl)
        bad = ~np.isfinite(r)
        xi = np.zeros_like(eta)
        good = ~bad
        if good.any():
            sub = np.flatnonzero(good)

            def ell_sub(e, yy):
                full = np.zeros_like(eta)
                full[sub] = e
                return ep(full, yl)[sub]

            xi_g, r_g = fixed_point_batch(ell_sub, eta[sub], yl[sub], gamma[sub], sq[sub],
                                          closed_form=self.closed_form)
            xi[sub] = xi_g
            nz = r_g != 0
            lam = np.ones_like(r_g)
            lam[nz] = xi_g[nz] / r_g[nz]
            lo, hi = float(lam.min()), float(lam.max())
            if not (lo > 0 and hi <= 1 + LAMBDA_SLACK):
                raise InvariantError(f"implicit scale factor left (0, 1]: [{lo}, {hi}] at step {self.n}")
            self.lam_min, self.lam_max = min(self.lam_min, lo), max(self.lam_max, hi)
        return th + xi[:, None] * xl, bad

    def result(self, mse=None, record_iters=None):
        return BatchResult(self.theta, self.avg, self.diverged, self.diverged_at, self.n,
                           self.lam_min, self.lam_max, mse, record_iters,
                           self.accum if self.method == "adagrad" else None)


def _glm_ell(model):
    return lambda eta, y, live: model.ell_prime(eta, y)


def _records(n_iter, record_every):
    if not record_every:
        return None
    return np.arange(record_every, n_iter + 1, record_every)


def stream_data(design, seed, r, n, chunk=4096):
    """The exact observation sequence replication ``r`` sees in :func:`run_stream_batch`."""
    rng = stream(seed, "rep", r)
    Xs, ys = [], []
    done = 0
    while done < n:
        m = min(chunk, n - done)
        d = design.sample(rng, m)
        Xs.append(d.X)
        ys.append(d.y)
        done += m
    return np.concatenate(Xs), np.concatenate(ys)


def run_stream_batch(design, model: NaturalParamModel, method: str, rate: LearningRate,
                     n_iter: int, reps: int, seed: int, *, theta0=None, chunk=4096,
                     blowup=BLOWUP_THRESHOLD, adagrad_eps=1e-8, theta_star=None,
                     record_every=0, rep_offset=0) -> BatchResult:
    """Fresh observations every step, drawn from ``design`` for each replication."""
    p = design.p
    theta0 = np.zeros((reps, p)) if theta0 is None else np.broadcast_to(theta0, (reps, p))
    runner = _Runner(method, rate, theta0, blowup, adagrad_eps, model.has_linear_score)
    rngs = [stream(seed, "rep", rep_offset + r) for r in range(reps)]
    ell = _glm_ell(model)
    rec = _records(n_iter, record_every)
    mse = np.empty((reps, rec.size)) if rec is not None else None
    k = 0
    done = 0
    while done < n_iter:
        m = min(chunk, n_iter - done)
        batch = [design.sample(g, m) for g in rngs]
        X = np.stack([b.X for b in batch])
        Y = np.stack([b.y for b in batch])
        for t in range(m):
            runner.step(X[:, t, :], Y[:, t], lambda e, y, live: ell(e, y, live))
            if rec is not None and k < rec.size and runner.n == rec[k]:
                mse[:, k] = np.sum((runner.theta - theta_star) ** 2, axis=1)
                k += 1
        done += m
    return runner.result(mse, rec)


def index_seed(seed, r):
    return derived_seed(seed, "idx", r)


def _indices(seed, offset, reps, n_data, n_iter):
    return np.stack([np.random.default_rng(index_seed(seed, offset + r)).integers(0, n_data, size=n_iter)
                     for r in range(reps)])


def run_dataset_batch(datasets: Sequence, model: NaturalParamModel, method: str,
                      rate: LearningRate, n_iter: int, seed: int, *, theta0=None,
                      blowup=BLOWUP_THRESHOLD, theta_star=None, record_every=0,
                      rate_scale=None, rep_offset=0) -> BatchResult:
    """One finite dataset per replication, sampled with replacement.

    Replication ``r`` (counted from ``rep_offset``) uses
    ``np.random.default_rng(index_seed(seed, r))`` for its indices, matching
    ``fit(..., SgdConfig(seed=index_seed(seed, r)))``.
    """
    reps = len(datasets)
    X = np.stack([d.X for d in datasets])
    Y = np.stack([d.y for d in datasets])
    idx = _indices(seed, rep_offset, reps, X.shape[1], n_iter)
    theta0 = np.zeros((reps, X.shape[2])) if theta0 is None else np.broadcast_to(theta0, (reps, X.shape[2]))
    runner = _Runner(method, rate, theta0, blowup, 1e-8, model.has_linear_score, rate_scale)
    rec = _records(n_iter, record_every)
    mse = np.empty((reps, rec.size)) if rec is not None else None
    rows = np.arange(reps)
    ell = _glm_ell(model)
    k = 0
    for t in range(n_iter):
        i = idx[:, t]
        runner.step(X[rows, i], Y[rows, i], ell)
        if rec is not None and k < rec.size and runner.n == rec[k]:
            mse[:, k] = np.sum((runner.theta - theta_star) ** 2, axis=1)
            k += 1
    return runner.result(mse, rec)


def run_cox_batch(datasets: Sequence[SurvivalDataset], method: str, rate: LearningRate,
                  n_iter: int, seed: int, *, theta0=None, blowup=BLOWUP_THRESHOLD,
                  theta_star=None, record_every=0, rate_scale=None,
                  rep_offset=0) -> BatchResult:
    """Cox SGD across replications; ``H`` is recomputed at every step.

    Indices follow the same rule as :func:`run_dataset_batch`, so replication
    ``r`` matches ``cox_fit`` with ``seed=index_seed(seed, r)``.
    """
    if method not in BATCH_METHODS:
        raise ValueError(f"Cox batches do not support {method!r}")
    reps = len(datasets)
    X = np.stack([d.X for d in datasets])
    D = np.stack([d.status for d in datasets])
    N, p = X.shape[1], X.shape[2]
    idx = _indices(seed, rep_offset, reps, N, n_iter)
    theta0 = np.zeros((reps, p)) if theta0 is None else np.broadcast_to(theta0, (reps, p))
    runner = _Runner(method, rate, theta0, blowup, 1e-8, False, rate_scale)
    rec = _records(n_iter, record_every)
    mse = np.empty((reps, rec.size)) if rec is not None else None
    rows = np.arange(reps)
    k = 0
    for t in range(n_iter):
        i = idx[:, t]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lin = np.einsum("rnp,rp->rn", X, runner.theta)
            eta = np.where(lin > ETA_MAX, np.inf, np.exp(np.minimum(lin, ETA_MAX)))
            cum = np.cumsum(eta[:, ::-1], axis=1)[:, ::-1]
            H = np.cumsum(D / cum, axis=1)
        H_i = H[rows, i]

        def ell(e, d, live, H_i=H_i):
            with np.errstate(over="ignore", invalid="ignore"):
                return d - H_i[live] * np.exp(e)

        runner.step(X[rows, i], D[rows, i], ell)
        if rec is not None and k < rec.size and runner.n == rec[k]:
            mse[:, k] = np.sum((runner.theta - theta_star) ** 2, axis=1)
            k += 1
    return runner.result(mse, rec)


def concat_results(parts: Sequence[BatchResult]) -> BatchResult:
    """Join batches of consecutive replications, in order."""
    if not parts:
        raise ValueError("nothing to join")

    def cat(name):
        vals = [getattr(p, name) for p in parts]
        return None if vals[0] is None else np.concatenate(vals)

    return BatchResult(cat("theta"), cat("avg_theta"), cat("diverged"), cat("diverged_at"),
                       parts[0].n_iter, min(p.lambda_min for p in parts),
                       max(p.lambda_max for p in parts), cat("mse"), parts[0].record_iters,
                       cat("adagrad_accum"))


def split_reps(reps: int, jobs: int):
    """``(offset, count)`` blocks covering ``range(reps)`` for ``jobs`` workers."""
    jobs = max(1, min(int(jobs), reps))
    bounds = np.linspace(0, reps, jobs + 1).astype(int)
    return [(int(a), int(b - a)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
