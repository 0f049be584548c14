"""Named simulation studies with built-in pass/fail thresholds.

Each study takes a dict of overrides on top of its defaults, runs its
replications through :mod:`isgd.simlab.replicate` and returns an
:class:`ExperimentReport`.  Reports hold one table (written as CSV), a list of
threshold checks and optional :class:`DiagnosticReport` blocks.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np

from .. import models
from ..asymptotics import (
    adagrad_variance,
    averaged_variance,
    optimal_gamma1,
    sgd_variance,
)
from ..cox import cox_information
from ..data import fmt
from ..engine import LearningRate
from ..linalg import jacobi_eigh
from .diagnostics import (
    DiagnosticReport,
    chisq_statistic,
    empirical_variance,
    ks_against_chisq,
    quantiles_of,
)
from .generators import ContaminatedLinear, CoxExponential, NormalLinear, PoissonBivariate
from .replicate import (
    concat_results,
    run_cox_batch,
    run_dataset_batch,
    run_stream_batch,
    split_reps,
)
from .rng import stream


@dataclass
class Check:
    name: str
    value: float
    threshold: str
    passed: bool

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {fmt(self.value)} ({self.threshold})"


@dataclass
class ExperimentReport:
    name: str
    params: dict
    columns: List[str]
    rows: List[list]
    checks: List[Check] = field(default_factory=list)
    diagnostics: Dict[str, DiagnosticReport] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def table_csv(self):
        out = [",".join(self.columns)]
        for row in self.rows:
            out.append(",".join(fmt(v) if isinstance(v, float) else str(v) for v in row))
        return "\n".join(out) + "\n"

    def summary(self):
        return {
            "experiment": self.name,
            "params": {k: _jsonable(v) for k, v in self.params.items()},
            "checks": [{"name": c.name, "value": c.value, "threshold": c.threshold,
                        "passed": c.passed} for c in self.checks],
            "passed": self.passed,
            "notes": {k: _jsonable(v) for k, v in self.notes.items()},
        }

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{self.name}.csv").write_text(self.table_csv())
        (directory / f"{self.name}.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        for key, diag in self.diagnostics.items():
            diag.write(directory, f"{self.name}_{key}")
        return directory


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


# ---------------------------------------------------------------- parameters

DEFAULTS: Dict[str, dict] = {
    "variance_sweep": dict(p=20, n_iter=1500, reps=150, gamma1=(1.2, 4.0, 10.0),
                           design_seed=0, seed=1, tolerance=0.25),
    "stability": dict(p=20, n_iter=1500, reps=150, gamma1=10.0, design_seed=0, seed=2),
    "normality": dict(p=5, n_iter=1200, reps=400, gamma1=(0.5, 1.0, 3.0), design_seed=0,
                      design_margin=1.0, seed=3, alpha=0.01),
    "poisson_appendix": dict(n_iter=20000, reps=100, gamma1=10.0 / 3.0, seed=4, tolerance=0.15),
    "cox_study": dict(n_data=1000, p=20, reps=50, passes=2.0, pilot_rate=0.3, seed=5,
                      record_every=20, max_ratio=0.25),
    "mest_study": dict(n_data=1000, p=50, reps=100, passes=2.0, huber_delta=1.345,
                       design_seed=0, seed=6, record_every=20, max_ratio=0.25),
    "averaging_study": dict(p=20, n_iter=100000, reps=100, gamma1=1.0, exponent=0.7,
                            design_seed=0, seed=7, tolerance=0.25),
    "adagrad_variance": dict(p=20, n_iter=100000, reps=100, gamma1=(0.5, 2.0),
                             design_seed=0, seed=8, tolerance=0.25),
}

EXPERIMENTS = tuple(DEFAULTS)


def _coerce(default, value):
    if isinstance(value, str):
        if isinstance(default, tuple):
            return tuple(float(v) for v in value.split(",") if v.strip())
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    if isinstance(default, tuple) and not isinstance(value, (tuple, list)):
        return (float(value),)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value)
    if isinstance(default, int) and not isinstance(default, bool):
        if float(value) != int(value):
            raise ValueError(f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve_params(name: str, overrides=None) -> dict:
    """Defaults for ``name`` updated by ``overrides``; unknown keys are rejected."""
    if name not in DEFAULTS:
        raise KeyError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    params = dict(DEFAULTS[name])
    for key, value in (overrides or {}).items():
        if key not in params:
            raise KeyError(f"experiment {name} has no parameter {key!r}")
        try:
            params[key] = _coerce(params[key], value)
        except ValueError as err:
            raise ValueError(f"bad value for {key}: {err}") from None
    return params


# ---------------------------------------------------------------- parallelism

def _fan_out(fn: Callable, reps: int, jobs: int):
    """Call ``fn(rep_offset, count)`` on replication blocks, joined in order."""
    blocks = split_reps(reps, jobs)
    if len(blocks) == 1:
        return fn(*blocks[0])
    with ProcessPoolExecutor(max_workers=len(blocks)) as pool:
        parts = list(pool.map(fn, *zip(*blocks)))
    return concat_results(parts)


def _stream_block(design, model, method, rate, n_iter, seed, offset, count, **kw):
    return run_stream_batch(design, model, method, rate, n_iter, count, seed,
                            rep_offset=offset, **kw)


def _stream(design, model, method, rate, n_iter, reps, seed, jobs, **kw):
    fn = partial(_stream_block, design, model, method, rate, n_iter, seed, **kw)
    return _fan_out(fn, reps, jobs)


def _cox_block(datasets, method, rate, n_iter, seed, scale, offset, count, **kw):
    sl = slice(offset, offset + count)
    return run_cox_batch(datasets[sl], method, rate, n_iter, seed, rep_offset=offset,
                         rate_scale=None if scale is None else scale[sl], **kw)


def _data_block(datasets, model, method, rate, n_iter, seed, scale, offset, count, **kw):
    sl = slice(offset, offset + count)
    return run_dataset_batch(datasets[sl], model, method, rate, n_iter, seed,
                             rep_offset=offset,
                             rate_scale=None if scale is None else scale[sl], **kw)


def _normal_design(p, design_seed):
    return NormalLinear.uniform_spectrum(p, seed=design_seed)


def _log_trace_row(theta, sigma, n):
    emp = math.log(np.trace(empirical_variance(theta)))
    theo = math.log(np.trace(sigma) / n)
    return emp, theo, abs(emp - theo) / abs(theo)


# ---------------------------------------------------------------- studies

def variance_sweep(params, jobs=1) -> ExperimentReport:
    """Empirical vs. asymptotic log-trace of ``Var(theta_n)`` across ``gamma1``."""
    design = _normal_design(params["p"], params["design_seed"])
    n = params["n_iter"]
    model = models.normal()
    cols = ["gamma1", "implicit_emp_logtrace", "theory_logtrace", "implicit_rel_err",
            "explicit_emp_logtrace", "explicit_diverged_frac"]
    rows, checks, lam = [], [], [1.0, 1.0]
    for g in params["gamma1"]:
        av = sgd_variance(design.fisher, np.eye(design.p), g)
        imp = _stream(design, model, "implicit", LearningRate(g), n, params["reps"],
                      params["seed"], jobs)
        exp_ = _stream(design, model, "explicit", LearningRate(g, mode="safeguard"), n,
                       params["reps"], params["seed"], jobs)
        ok = ~exp_.diverged
        exp_lt = math.log(np.trace(empirical_variance(exp_.theta[ok]))) if ok.sum() > 1 else math.nan
        if av.valid:
            emp, theo, rel = _log_trace_row(imp.theta, av.sigma, n)
            checks.append(Check(f"implicit log-trace gamma1={g:g}", rel,
                                f"relative error <= {params['tolerance']:g}",
                                rel <= params["tolerance"]))
        else:
            emp = math.log(np.trace(empirical_variance(imp.theta)))
            theo, rel = math.nan, math.nan
        rows.append([float(g), emp, theo, rel, exp_lt, exp_.diverged_fraction])
        lam = [min(lam[0], imp.lambda_min), max(lam[1], imp.lambda_max)]
    return ExperimentReport("variance_sweep", params, cols, rows, checks,
                            notes={"s_diag": design.s_diag, "lambda_range": lam})


def stability(params, jobs=1) -> ExperimentReport:
    """Plain ``gamma1 / n`` explicit SGD against implicit SGD at a large ``gamma1``."""
    design = _normal_design(params["p"], params["design_seed"])
    g, n, reps = params["gamma1"], params["n_iter"], params["reps"]
    model = models.normal()
    exp_ = _stream(design, model, "explicit", LearningRate(g), n, reps, params["seed"], jobs)
    imp = _stream(design, model, "implicit", LearningRate(g), n, reps, params["seed"], jobs)
    rows = [["explicit", exp_.diverged_fraction], ["implicit", imp.diverged_fraction]]
    checks = [
        Check("explicit diverged fraction", exp_.diverged_fraction, ">= 0.5",
              exp_.diverged_fraction >= 0.5),
        Check("implicit diverged fraction", imp.diverged_fraction, "== 0",
              imp.diverged_fraction == 0.0),
    ]
    notes = {"lambda_range": [imp.lambda_min, imp.lambda_max]}
    return ExperimentReport("stability", params, ["method", "diverged_frac"], rows, checks,
                            notes=notes)


def normality_design(p, gamma1s, design_seed=0, margin=1.0, max_tries=1000):
    """First spectrum draw with ``2 g min(s) - 1 >= margin`` for every ``g``.

    The covariate variances stay Uniform(0.5, 5); the rule only picks which
    draw, so that ``2 gamma1 S - I`` is comfortably positive definite for the
    whole grid and the asymptotic variance exists at ``N`` iterations.
    """
    theta_star = 10.0 * np.exp(-2.0 * np.arange(1, p + 1))
    gmin = min(gamma1s)
    for k in range(design_seed, design_seed + max_tries):
        d = NormalLinear.uniform_spectrum(p, seed=k, theta_star=theta_star)
        if 2.0 * gmin * d.s_diag.min() - 1.0 >= margin:
            return d, k
    raise RuntimeError("no spectrum draw met the margin")


def normality(params, jobs=1) -> ExperimentReport:
    """KS test of ``N (theta_N - theta*)' Sigma^-1 (theta_N - theta*)`` against chi^2_p."""
    design, used_seed = normality_design(params["p"], params["gamma1"], params["design_seed"],
                                         params["design_margin"])
    n, p = params["n_iter"], design.p
    cols = ["gamma1", "chisq_mean", "ks_statistic", "ks_pvalue", "diverged_frac"]
    rows, checks, diags, lam = [], [], {}, [1.0, 1.0]
    for g in params["gamma1"]:
        av = sgd_variance(design.fisher, np.eye(p), g)
        res = _stream(design, models.normal(), "implicit", LearningRate(g), n, params["reps"],
                      params["seed"], jobs)
        lam = [min(lam[0], res.lambda_min), max(lam[1], res.lambda_max)]
        if not av.valid:
            rows.append([float(g), math.nan, math.nan, math.nan, res.diverged_fraction])
            checks.append(Check(f"KS p-value gamma1={g:g}", math.nan,
                                "asymptotic variance undefined", False))
            continue
        stats_ = np.array([chisq_statistic(t, design.theta_star, av.sigma, n)
                           for t in res.theta[~res.diverged]])
        D, pv = ks_against_chisq(stats_, p)
        rows.append([float(g), float(stats_.mean()), D, pv, res.diverged_fraction])
        checks.append(Check(f"KS p-value gamma1={g:g}", pv, f"> {params['alpha']:g}",
                            pv > params["alpha"]))
        diags[f"gamma1_{g:g}"] = DiagnosticReport(
            empirical_variance=n * empirical_variance(res.theta), theoretical_variance=av.sigma,
            chisq_samples=stats_, ks_statistic=D, ks_pvalue=pv)
    return ExperimentReport("normality", params, cols, rows, checks, diags,
                            notes={"spectrum_seed": used_seed, "s_diag": design.s_diag,
                                   "lambda_range": lam})


POISSON_TARGET = np.diag([0.8, 0.62])


def poisson_appendix(params, jobs=1) -> ExperimentReport:
    """``(1/gamma_n) Var(theta_n)`` for implicit Poisson SGD with ``gamma_n = gamma1 / n``."""
    design = PoissonBivariate()
    g, n = params["gamma1"], params["n_iter"]
    res = _stream(design, models.poisson(), "implicit", LearningRate(g), n, params["reps"],
                  params["seed"], jobs)
    ok = ~res.diverged
    scaled = empirical_variance(res.theta[ok]) * n / g
    theory = sgd_variance(design.fisher, np.eye(2), g).sigma / g
    err = float(np.max(np.abs(scaled - POISSON_TARGET)))
    rows = [[i + 1, j + 1, float(scaled[i, j]), float(POISSON_TARGET[i, j]), float(theory[i, j])]
            for i in range(2) for j in range(2)]
    checks = [Check("max entrywise deviation from diag(0.8, 0.62)", err,
                    f"<= {params['tolerance']:g}", err <= params["tolerance"])]
    diag = DiagnosticReport(empirical_variance=scaled, theoretical_variance=theory)
    return ExperimentReport("poisson_appendix", params, ["i", "j", "empirical", "target", "theory"],
                            rows, checks, {"scaled_variance": diag},
                            notes={"diverged_frac": res.diverged_fraction,
                                   "lambda_range": [res.lambda_min, res.lambda_max]})


def _mse_report(name, params, res, n_data, checks_extra=None, notes=None):
    iters = res.record_iters
    q = quantiles_of(res.mse)
    cols = ["iter", "q05", "q50", "q95"]
    rows = [[int(i), float(a), float(b), float(c)] for i, a, b, c in zip(iters, q[0.05], q[0.5], q[0.95])]
    early, late = n_data // 10, int(round(params["passes"] * n_data))
    med = np.median(res.mse, axis=0)
    m_early = float(med[np.searchsorted(iters, early)])
    m_late = float(med[np.searchsorted(iters, late)])
    ratio = m_late / m_early
    checks = [Check(f"median MSE ratio iter {late} / iter {early}", ratio,
                    f"< {params['max_ratio']:g}", ratio < params["max_ratio"])]
    diag = DiagnosticReport(mse_quantiles=q)
    notes = dict(notes or {})
    notes.update(median_mse_early=m_early, median_mse_late=m_late,
                 diverged_frac=res.diverged_fraction,
                 lambda_range=[res.lambda_min, res.lambda_max])
    return ExperimentReport(name, params, cols, rows, checks, {"mse": diag}, notes)


def _check_record_grid(params, n_data):
    every = params["record_every"]
    for it in (n_data // 10, int(round(params["passes"] * n_data))):
        if it % every:
            raise ValueError(f"record_every={every} does not hit iteration {it}")


def cox_gamma1(dataset, theta_pilot):
    """Optimal ``gamma1`` from the per-unit observed information at a pilot fit."""
    w, _ = jacobi_eigh(cox_information(dataset, theta_pilot) / dataset.n)
    if w[-1] <= 0:
        raise ArithmeticError("observed information is not positive definite at the pilot")
    return optimal_gamma1(w)


def cox_study(params, jobs=1) -> ExperimentReport:
    """Implicit SGD on simulated censored survival data.

    Learning rate: a one-pass AdaGrad pilot, then ``gamma1`` from the optimal
    rate rule on the eigenvalues of the observed information at the pilot.
    """
    N, reps = params["n_data"], params["reps"]
    _check_record_grid(params, N)
    design = CoxExponential(p=params["p"])
    datasets = [design.sample(stream(params["seed"], "rep", r), N) for r in range(reps)]
    pilot = _fan_out(partial(_cox_block, datasets, "adagrad",
                             LearningRate(params["pilot_rate"], mode="constant"), N,
                             params["seed"] + 1, None), reps, jobs)
    g1 = np.array([cox_gamma1(d, th) for d, th in zip(datasets, pilot.theta)])
    n_iter = int(round(params["passes"] * N))
    res = _fan_out(partial(_cox_block, datasets, "implicit", LearningRate(1.0), n_iter,
                           params["seed"], g1, theta_star=design.theta_star,
                           record_every=params["record_every"]), reps, jobs)
    return _mse_report("cox_study", params, res, N,
                       notes={"gamma1_range": [float(g1.min()), float(g1.max())],
                              "event_fraction": float(np.mean([d.status.mean() for d in datasets]))})


def mest_study(params, jobs=1) -> ExperimentReport:
    """Implicit Huber SGD on contaminated linear data; ``gamma1`` from the
    optimal rate rule on the sample second-moment matrix of the covariates."""
    N, reps = params["n_data"], params["reps"]
    _check_record_grid(params, N)
    design = ContaminatedLinear.random_theta(params["p"], seed=params["design_seed"], n_scale=N)
    datasets = [design.sample(stream(params["seed"], "rep", r), N) for r in range(reps)]
    g1 = np.array([optimal_gamma1(jacobi_eigh(d.X.T @ d.X / d.n)[0]) for d in datasets])
    n_iter = int(round(params["passes"] * N))
    model = models.huber(params["huber_delta"])
    res = _fan_out(partial(_data_block, datasets, model, "implicit", LearningRate(1.0), n_iter,
                           params["seed"], g1, theta_star=design.theta_star,
                           record_every=params["record_every"]), reps, jobs)
    return _mse_report("mest_study", params, res, N,
                       notes={"gamma1_range": [float(g1.min()), float(g1.max())]})


def averaging_study(params, jobs=1) -> ExperimentReport:
    """``n tr Var(theta_bar_n)`` for averaged implicit SGD against ``tr F^-1``."""
    design = _normal_design(params["p"], params["design_seed"])
    n = params["n_iter"]
    rate = LearningRate(params["gamma1"], params["exponent"])
    res = _stream(design, models.normal(), "implicit_avg", rate, n, params["reps"],
                  params["seed"], jobs)
    emp = n * float(np.trace(empirical_variance(res.avg_theta)))
    theo = float(np.trace(averaged_variance(design.fisher).sigma))
    rel = abs(emp - theo) / theo
    checks = [Check("n tr Var(avg) vs tr F^-1", rel, f"relative error <= {params['tolerance']:g}",
                    rel <= params["tolerance"])]
    return ExperimentReport("averaging_study", params, ["empirical_trace", "theory_trace", "rel_err"],
                            [[emp, theo, rel]], checks,
                            notes={"diverged_frac": res.diverged_fraction,
                                   "lambda_range": [res.lambda_min, res.lambda_max]})


def adagrad_variance_study(params, jobs=1) -> ExperimentReport:
    """``sqrt(n) tr Var(theta_n)`` for AdaGrad against ``(gamma1/2) tr diag(F)^-1/2``."""
    design = _normal_design(params["p"], params["design_seed"])
    n = params["n_iter"]
    rows, checks = [], []
    for g in params["gamma1"]:
        res = _stream(design, models.normal(), "adagrad", LearningRate(g, mode="constant"), n,
                      params["reps"], params["seed"], jobs)
        emp = math.sqrt(n) * float(np.trace(empirical_variance(res.theta)))
        theo = float(np.trace(adagrad_variance(design.fisher, g).sigma))
        rel = abs(emp - theo) / theo
        rows.append([float(g), emp, theo, rel])
        checks.append(Check(f"sqrt(n) tr Var gamma1={g:g}", rel,
                            f"relative error <= {params['tolerance']:g}", rel <= params["tolerance"]))
    return ExperimentReport("adagrad_variance", params,
                            ["gamma1", "empirical_trace", "theory_trace", "rel_err"], rows, checks)


RUNNERS = {
    "variance_sweep": variance_sweep,
    "stability": stability,
    "normality": normality,
    "poisson_appendix": poisson_appendix,
    "cox_study": cox_study,
    "mest_study": mest_study,
    "averaging_study": averaging_study,
    "adagrad_variance": adagrad_variance_study,
}


def run_experiment(name: str, overrides=None, jobs: int = 1) -> ExperimentReport:
    params = resolve_params(name, overrides)
    return RUNNERS[name](params, jobs=jobs)
