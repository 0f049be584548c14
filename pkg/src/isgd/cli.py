"""Command-line front end: ``isgd fit | experiment | asymp | gen``.

Exit codes: 0 success, 1 usage or input error, 2 a result was written but a
run diverged or missed its thresholds, 3 the requested asymptotic variance is
outside its region of validity.

Settings resolve as command-line flag > config file (``key=value`` lines) >
``ISGD_SEED`` (seed only) > built-in default.  Every command that writes
files also writes ``manifest.json``; ``--from-manifest`` replays it.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, models
from .asymptotics import (
    AssumptionError,
    adagrad_variance,
    averaged_variance,
    empirical_fisher,
    optimal_gamma1,
    stability_max_gain,
    sgd_variance,
)
from .cox import cox_fit
from .data import (
    DataFormatError,
    fmt,
    read_dataset_csv,
    read_survival_csv,
    write_dataset_csv,
    write_survival_csv,
    write_trajectory_csv,
)
from .engine import ConfigError, FixedPointError, LearningRate, SgdConfig, fit
from .linalg import jacobi_eigh

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_INVALID = 0, 1, 2, 3
SEED_ENV = "ISGD_SEED"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def read_config_file(path) -> dict:
    """``key=value`` per line; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def input_hashes(paths) -> dict:
    out = {}
    for p in paths:
        data = Path(p).read_bytes()
        out[str(p)] = {"git_blob_sha1": git_blob_hash(data),
                       "sha256": hashlib.sha256(data).hexdigest()}
    return out


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, command, config, seed, inputs, started, name="manifest.json"):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": input_hashes(inputs),
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    path = Path(out_dir) / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path, command):
    m = json.loads(Path(path).read_text())
    if m.get("command") != command:
        raise UsageError(f"manifest is for {m.get('command')!r}, not {command!r}")
    cfg = dict(m["config"])
    if m.get("seed") is not None:
        cfg["seed"] = m["seed"]
    return cfg


def resolve(cli: dict, file_cfg: dict, defaults: dict, seed_key="seed") -> dict:
    """Merge flag > file > ``ISGD_SEED`` > default; ``None`` flags are unset."""
    out = dict(defaults)
    out.update({k: v for k, v in file_cfg.items()})
    if seed_key in defaults and seed_key not in file_cfg and os.environ.get(SEED_ENV):
        out[seed_key] = os.environ[SEED_ENV]
    out.update({k: v for k, v in cli.items() if v is not None})
    return out


def _parse_bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {v!r}")


def _opt(conv, v):
    return None if v is None or v == "" else conv(v)


def _floats(text):
    try:
        return [float(t) for t in str(text).replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _print_matrix(label, M, out):
    M = np.atleast_2d(M)
    for i, row in enumerate(M):
        print(f"{label}[{i + 1}]: " + " ".join(fmt(v) for v in row), file=out)


# ---------------------------------------------------------------- fit

FIT_DEFAULTS = dict(model="normal", method="implicit", gamma1=1.0, gamma_exponent=1.0,
                    lr_mode="power", lr_cap=0.3, conditioner=None, seed=None, niters=None,
                    npasses=None, sampling="replace", track_lambda=False,
                    blowup_threshold=1e8, stride=0)
FIT_KEYS = tuple(FIT_DEFAULTS)


def fit_config(cfg: dict) -> SgdConfig:
    try:
        rate = LearningRate(float(cfg["gamma1"]), float(cfg["gamma_exponent"]), str(cfg["lr_mode"]),
                            float(cfg["lr_cap"]))
        return SgdConfig(
            method=str(cfg["method"]),
            rate=rate,
            conditioner=_opt(str, cfg["conditioner"]),
            seed=_opt(int, cfg["seed"]),
            niters=_opt(int, cfg["niters"]),
            npasses=_opt(float, cfg["npasses"]),
            sampling=str(cfg["sampling"]),
            track_lambda=_parse_bool(cfg["track_lambda"]),
            blowup_threshold=float(cfg["blowup_threshold"]),
            stride=int(cfg["stride"]),
        )
    except ValueError as err:
        raise UsageError(str(err)) from None


def cmd_fit(args, out=sys.stdout) -> int:
    started = _now()
    file_cfg = {}
    if args.from_manifest:
        replay = load_manifest(args.from_manifest, "fit")
        replay.pop("data", None)
        file_cfg.update(replay)
    if args.config:
        file_cfg.update(read_config_file(args.config))
    unknown = set(file_cfg) - set(FIT_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cli = {k: getattr(args, k) for k in FIT_KEYS if hasattr(args, k)}
    if args.track_lambda is False:
        cli["track_lambda"] = None
    cfg = resolve(cli, file_cfg, FIT_DEFAULTS)
    if cfg["seed"] is None and cfg["sampling"] == "replace":
        raise UsageError(f"a seed is required: pass --seed, set seed= in the config, or {SEED_ENV}")
    config = fit_config(cfg)

    token = str(cfg["model"]).lower()
    if token == "cox":
        data = read_survival_csv(args.data)
        result = cox_fit(data, config)
    else:
        model = models.from_token(token)
        data = read_dataset_csv(args.data)
        result = fit(data, model, config)

    out_dir = Path(args.out or (Path(args.data).stem + "_fit"))
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["coord,theta,avg_theta"]
    lines += [f"{j + 1},{fmt(a)},{fmt(b)}" for j, (a, b) in enumerate(zip(result.theta, result.avg_theta))]
    (out_dir / "result.csv").write_text("\n".join(lines) + "\n")
    if result.trajectory is not None:
        write_trajectory_csv(out_dir / "trajectory.csv", result.trajectory)
    if result.lambdas is not None:
        (out_dir / "lambdas.csv").write_text(
            "iter,lambda\n" + "".join(f"{i + 1},{fmt(v)}\n" for i, v in enumerate(result.lambdas)))
    summary = {"n_steps": result.n_steps, "diverged": result.diverged, "message": result.message}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out_dir, "fit", {**{k: cfg[k] for k in FIT_KEYS if k != "seed"},
                                    "data": str(args.data)},
                   None if cfg["seed"] is None else int(cfg["seed"]), [args.data], started)
    print(f"theta: " + " ".join(fmt(v) for v in result.theta), file=out)
    print(f"steps: {result.n_steps}", file=out)
    if result.diverged:
        print(f"diverged: {result.message}", file=out)
        return EXIT_DIVERGED
    return EXIT_OK


# ---------------------------------------------------------------- experiment

def _overrides_from_extra(extra):
    """``--key value`` or ``--key=value`` pairs into a dict."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            val = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out


def cmd_experiment(args, extra, out=sys.stdout) -> int:
    from .simlab import experiments as ex

    started = _now()
    if args.name not in ex.EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.name!r}; choose from {', '.join(ex.EXPERIMENTS)}")
    file_cfg = {}
    if args.from_manifest:
        file_cfg.update(load_manifest(args.from_manifest, f"experiment {args.name}"))
    if args.config:
        file_cfg.update(read_config_file(args.config))
    cli = _overrides_from_extra(extra)
    for src in (cli, file_cfg):
        for key in src:
            if key not in ex.DEFAULTS[args.name]:
                raise UsageError(f"experiment {args.name} has no parameter {key!r}")
    merged = resolve(cli, file_cfg, {k: None for k in ex.DEFAULTS[args.name]})
    overrides = {k: v for k, v in merged.items() if v is not None}
    try:
        params = ex.resolve_params(args.name, overrides)
    except (KeyError, ValueError) as err:
        raise UsageError(str(err)) from None
    report = ex.RUNNERS[args.name](params, jobs=args.jobs)
    out_dir = report.write(args.out or Path("results") / args.name)
    seed = params.get("seed")
    cfg = {k: ex._jsonable(v) for k, v in params.items() if k != "seed"}
    write_manifest(out_dir, f"experiment {args.name}", cfg, seed, [], started)
    for c in report.checks:
        print(c.line(), file=out)
    print(f"wrote {out_dir}", file=out)
    return EXIT_OK if report.passed else EXIT_DIVERGED


# ---------------------------------------------------------------- asymp

def _parse_matrix(text):
    rows = [r for r in str(text).split(";") if r.strip()]
    M = np.array([_floats(r) for r in rows], dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise UsageError("matrix must be square; separate rows with ';'")
    return M


def cmd_asymp(args, out=sys.stdout) -> int:
    if args.stability_gain is not None:
        if args.stability_gain <= 0:
            raise UsageError("--stability-gain needs b > 0")
        print(f"stability_gain: {fmt(stability_max_gain(args.stability_gain))}", file=out)
        if args.fisher is None and args.fisher_diag is None and args.data is None:
            return EXIT_OK

    sources = [s for s in (args.fisher, args.fisher_diag, args.data) if s is not None]
    if len(sources) != 1:
        raise UsageError("give exactly one of --fisher, --fisher-diag, --data")
    if args.fisher is not None:
        F = _parse_matrix(args.fisher)
    elif args.fisher_diag is not None:
        F = np.diag(_floats(args.fisher_diag))
    else:
        if args.theta is None:
            raise UsageError("--data needs --theta to evaluate the Fisher information at")
        model = models.from_token(args.model)
        data = read_dataset_csv(args.data)
        theta = np.array(_floats(args.theta))
        if theta.size != data.p:
            raise UsageError("--theta has the wrong dimension")
        F = empirical_fisher(data, model, theta).matrix
    if not np.allclose(F, F.T):
        raise UsageError("Fisher information must be symmetric")
    eig = jacobi_eigh(F)[0]
    print("eigenvalues: " + " ".join(fmt(v) for v in eig), file=out)
    if eig[-1] <= 0:
        print(f"invalid: Fisher information is not positive definite (min eigenvalue {fmt(eig[-1])})",
              file=out)
        return EXIT_INVALID
    print(f"optimal_gamma1: {fmt(optimal_gamma1(eig))}", file=out)
    _print_matrix("averaged_variance", averaged_variance(F).sigma, out)
    code = EXIT_OK
    if args.gamma1 is not None:
        C = np.eye(F.shape[0]) if args.conditioner_diag is None else np.diag(_floats(args.conditioner_diag))
        if C.shape != F.shape:
            raise UsageError("conditioner dimension does not match the Fisher information")
        try:
            av = sgd_variance(F, C, args.gamma1)
        except AssumptionError as err:
            raise UsageError(str(err)) from None
        if av.valid:
            _print_matrix("variance", av.sigma, out)
            print(f"variance_trace: {fmt(np.trace(av.sigma))}", file=out)
        else:
            print(f"invalid: 2*gamma1*C*F - I is not positive definite (min eigenvalue {fmt(av.min_eig)})",
                  file=out)
            code = EXIT_INVALID
        _print_matrix("adagrad_variance", adagrad_variance(F, args.gamma1).sigma, out)
    return code


# ---------------------------------------------------------------- gen

def cmd_gen(args, out=sys.stdout) -> int:
    from .simlab import generators as g

    started = _now()
    seed = args.seed if args.seed is not None else os.environ.get(SEED_ENV)
    if seed is None:
        raise UsageError(f"a seed is required: pass --seed or set {SEED_ENV}")
    seed = int(seed)
    kind, n = args.kind, args.n
    if n is None or n < 1:
        raise UsageError("--n must be a positive integer")
    if kind == "normal":
        design = g.NormalLinear.uniform_spectrum(args.p or 20, seed=args.design_seed)
        data = g.gen_normal_linear(design, n, seed)
    elif kind == "poisson":
        data = g.gen_poisson_bivariate(seed, n)
    elif kind == "glmnet":
        data = g.gen_glmnet(g.GlmnetCorrelated(args.p or 20, args.rho, args.snr), n, seed)
    elif kind == "cox":
        design = g.CoxExponential(p=args.p or 20, censor_quantile=args.censor_quantile,
                                  censor=not args.no_censor)
        data = g.gen_cox(design, n, seed)
    elif kind == "contaminated":
        design = g.ContaminatedLinear.random_theta(args.p or 200, seed=args.design_seed, n_scale=n)
        data = g.gen_contaminated(design, n, seed)
    else:  # argparse restricts the choices
        raise UsageError(f"unknown generator {kind!r}")
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    if kind == "cox":
        write_survival_csv(path, data)
    else:
        write_dataset_csv(path, data)
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "seed", "command")}
    write_manifest(path.parent, f"gen {kind}", cfg, seed, [path], started,
                   name=f"{path.stem}.manifest.json")
    print(f"wrote {path} ({data.n} rows)", file=out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isgd", description="Implicit and explicit SGD estimation toolkit.")
    p.add_argument("--version", action="version", version=f"isgd {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a CSV dataset")
    f.add_argument("data", help="CSV file (y,x1..xp; time,status,x1..xp for --model cox)")
    f.add_argument("--model", help="normal, poisson, logistic, squared, huber[:delta] or cox")
    f.add_argument("--method", help="explicit, implicit, explicit_avg, implicit_avg, adagrad, amari")
    f.add_argument("--gamma1", type=float)
    f.add_argument("--gamma-exponent", dest="gamma_exponent", type=float)
    f.add_argument("--lr-mode", dest="lr_mode", choices=("power", "constant", "safeguard"))
    f.add_argument("--lr-cap", dest="lr_cap", type=float)
    f.add_argument("--conditioner", help="identity, adagrad or amari")
    f.add_argument("--seed", type=int)
    f.add_argument("--niters", type=int)
    f.add_argument("--npasses", type=float)
    f.add_argument("--sampling", choices=("replace", "stream"))
    f.add_argument("--track-lambda", dest="track_lambda", action="store_true")
    f.add_argument("--blowup-threshold", dest="blowup_threshold", type=float)
    f.add_argument("--stride", type=int, help="record the trajectory every STRIDE steps")
    f.add_argument("--config", help="key=value config file")
    f.add_argument("--from-manifest", dest="from_manifest")
    f.add_argument("--out", help="output directory")

    e = sub.add_parser("experiment", help="run a named simulation study",
                       description="Extra --key value pairs override the study's parameters.")
    e.add_argument("name")
    e.add_argument("--config")
    e.add_argument("--from-manifest", dest="from_manifest")
    e.add_argument("--out")
    e.add_argument("--jobs", type=int, default=1, help="worker processes for replications")

    a = sub.add_parser("asymp", help="asymptotic variances and learning-rate tuning")
    a.add_argument("--fisher", help="matrix, rows separated by ';' (e.g. '0.4,0;0,0.8')")
    a.add_argument("--fisher-diag", dest="fisher_diag", help="comma-separated diagonal")
    a.add_argument("--data", help="estimate the Fisher information from a CSV dataset")
    a.add_argument("--model", default="normal")
    a.add_argument("--theta", help="parameter at which to evaluate the estimate")
    a.add_argument("--gamma1", type=float)
    a.add_argument("--conditioner-diag", dest="conditioner_diag")
    a.add_argument("--stability-gain", dest="stability_gain", type=float, metavar="B")

    gp = sub.add_parser("gen", help="generate a simulated dataset as CSV")
    gp.add_argument("kind", choices=("normal", "poisson", "glmnet", "cox", "contaminated"))
    gp.add_argument("--n", type=int, required=True)
    gp.add_argument("--p", type=int)
    gp.add_argument("--seed", type=int)
    gp.add_argument("--design-seed", dest="design_seed", type=int, default=0)
    gp.add_argument("--rho", type=float, default=0.0)
    gp.add_argument("--snr", type=float, default=3.0)
    gp.add_argument("--censor-quantile", dest="censor_quantile", type=float, default=0.8)
    gp.add_argument("--no-censor", dest="no_censor", action="store_true")
    gp.add_argument("--out", required=True)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if args.command != "experiment" and extra:
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "fit":
            return cmd_fit(args, out)
        if args.command == "experiment":
            return cmd_experiment(args, extra, out)
        if args.command == "asymp":
            return cmd_asymp(args, out)
        return cmd_gen(args, out)
    except (UsageError, ConfigError, DataFormatError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FixedPointError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
