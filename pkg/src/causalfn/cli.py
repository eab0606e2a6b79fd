"""Command-line front end: dataset ingestion, estimator invocation,
inference reports, selection, and simulation campaigns.

Every run writes a JSON report that echoes the fully resolved
configuration (defaults included); reports carry no timestamps so a fixed
seed yields byte-identical output.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .cv import CvConfig, cv_select
from .density import regularized_onestep
from .hilbert import Basis, RegSeq
from .inference import band_confidence_report, equality_test, mmd_test
from .nuisance import read_csv
from .rkhs import band_onestep
from .simlab import load_experiment_config, run_experiment

__all__ = ["main", "run"]


def _common_flags(sub):
    sub.add_argument("--basis", choices=["cosine", "legendre", "cv"], default="cosine")
    sub.add_argument("--kmax", type=int, default=64)
    sub.add_argument("--beta", default="hard:16")
    sub.add_argument("--folds", type=int, default=2)
    sub.add_argument("--alpha", type=float, default=0.05)
    sub.add_argument("--boot", type=int, default=1000)
    sub.add_argument("--threshold", choices=["bootstrap", "szekely"], default="bootstrap")
    sub.add_argument("--omega", choices=["identity", "wald-cov", "wald-corr"], default="identity")
    sub.add_argument("--lambda", dest="lam", type=float, default=0.5)
    sub.add_argument("--grid", type=int, default=500)
    sub.add_argument("--bandlimit", type=float, default=2.0)
    sub.add_argument("--kernel-bw-mult", type=float, default=1.0)
    sub.add_argument("--learner", choices=["logistic", "nw"], default="logistic")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", default=None)
    sub.add_argument("--curve-out", default=None)
    sub.add_argument("--threads", type=int, default=None)


def _parse_beta(text: str) -> RegSeq:
    if text.startswith("hard:"):
        return RegSeq.hard(int(text.split(":", 1)[1]))
    if text.startswith("rational:"):
        body = dict(part.split("=") for part in text.split(":", 1)[1].split(","))
        return RegSeq.rational(float(body["c"]), float(body["p"]))
    raise ValueError(f"--beta must be hard:K or rational:c=FLOAT,p=FLOAT, got {text!r}")


def _resolved_config(args, subcommand: str) -> dict:
    keep = {
        "basis",
        "kmax",
        "beta",
        "folds",
        "alpha",
        "boot",
        "threshold",
        "omega",
        "lam",
        "grid",
        "bandlimit",
        "kernel_bw_mult",
        "learner",
        "seed",
        "out",
        "curve_out",
        "threads",
        "data",
        "config",
    }
    cfg = {k: v for k, v in vars(args).items() if k in keep}
    cfg["subcommand"] = subcommand
    return cfg


def _emit(report: dict, out_path: str | None) -> None:
    text = json.dumps(report, sort_keys=True, indent=2)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _load_unit_data(path: str) -> tuple:
    data = read_csv(path)
    rescaled = False
    if data.y.min() < 0.0 or data.y.max() > 1.0:
        data = data.rescaled_to_unit()
        rescaled = True
    return data, rescaled


def _cmd_estimate(args) -> int:
    data, rescaled = _load_unit_data(args.data)
    basis = Basis(args.basis if args.basis != "cv" else "cosine", args.kmax)
    beta = _parse_beta(args.beta)
    if args.basis == "cv":
        cfg = CvConfig(seed=args.seed, bases=(Basis("cosine", args.kmax), Basis("legendre", args.kmax)))
        beta_sel, basis = cv_select(data, cfg, basis, learner=args.learner, grid=args.grid)
        beta = beta_sel
    fit = regularized_onestep(
        data, basis, beta, folds=args.folds, seed=args.seed, learner=args.learner, grid=args.grid
    )
    report = {
        "config": _resolved_config(args, "estimate"),
        "estimator": "regularized-onestep",
        "basis": basis.kind,
        "beta": beta.label(),
        "beta_materialized": list(fit.beta.materialize(basis.k_max)),
        "coefficients": list(fit.estimate.coeffs),
        "plugin_coefficients": list(fit.plugin_coeffs),
        "sigma_beta": fit.sigma_beta(),
        "n": fit.n,
        "rescaled_outcome": rescaled,
        "seed": args.seed,
    }
    _emit(report, args.out)
    if args.curve_out:
        grid = np.linspace(0.0, 1.0, args.grid)
        vals = fit.estimate(grid)
        _write_curve(args.curve_out, grid, vals)
    return 0


def _cmd_band_estimate(args) -> int:
    data = read_csv(args.data)
    fit = band_onestep(
        data,
        b=args.bandlimit,
        folds=args.folds,
        seed=args.seed,
        learner=args.learner,
        m=args.grid,
        dens_grid=args.grid,
    )
    report_cs = band_confidence_report(fit, alpha=args.alpha, b_reps=args.boot, seed=args.seed, threshold=args.threshold)
    report = {
        "config": _resolved_config(args, "band-estimate"),
        "estimator": "band-onestep",
        "alpha": args.alpha,
        "zeta_hat": report_cs.threshold.value,
        "method": report_cs.threshold.method,
        "omega_kind": "identity",
        "lambda": 1.0,
        "radius": report_cs.radius,
        "bandlimit": args.bandlimit,
        "n": data.n,
        "seed": args.seed,
        "B": args.boot if args.threshold == "bootstrap" else None,
    }
    _emit(report, args.out)
    if args.curve_out:
        _write_curve(args.curve_out, fit.grid.points, fit.estimate.values)
    return 0


def _cmd_density_test(args) -> int:
    if args.threshold == "szekely" and args.omega != "identity":
        raise ValueError("invalid flags: --threshold szekely requires --omega identity")
    data, rescaled = _load_unit_data(args.data)
    basis = Basis(args.basis if args.basis != "cv" else "cosine", args.kmax)
    beta = _parse_beta(args.beta)
    res = equality_test(
        data,
        basis,
        beta,
        omega=args.omega,
        lam=args.lam,
        alpha=args.alpha,
        b_reps=args.boot,
        seed=args.seed,
        learner=args.learner,
        folds=args.folds,
        grid=args.grid,
        threshold=args.threshold,
    )
    res["config"] = _resolved_config(args, "density-test")
    res["rescaled_outcome"] = rescaled
    _emit(res, args.out)
    return 0


def _cmd_kme_test(args) -> int:
    data = read_csv(args.data)
    res = mmd_test(
        data,
        bw_mult=args.kernel_bw_mult,
        alpha=args.alpha,
        b_reps=args.boot,
        seed=args.seed,
        learner=args.learner,
        folds=args.folds,
        grid=args.grid,
    )
    res["config"] = _resolved_config(args, "kme-test")
    _emit(res, args.out)
    return 0


def _cmd_cv(args) -> int:
    data, rescaled = _load_unit_data(args.data)
    bases = (
        (Basis("cosine", args.kmax), Basis("legendre", args.kmax))
        if args.basis == "cv"
        else (Basis(args.basis, args.kmax),)
    )
    cfg = CvConfig(seed=args.seed, bases=bases)
    beta, basis, risks = cv_select(data, cfg, bases[0], learner=args.learner, grid=args.grid, return_risks=True)
    report = {
        "config": _resolved_config(args, "cv"),
        "selected_beta": beta.label(),
        "selected_basis": basis.kind,
        "tag": "estimation-only",
        "risks": {b: {lab: r["mean"] for lab, r in table.items()} for b, table in risks.items()},
        "rescaled_outcome": rescaled,
        "seed": args.seed,
    }
    _emit(report, args.out)
    return 0


def _cmd_simulate(args) -> int:
    spec = load_experiment_config(args.config)
    if args.threads is not None:
        spec = __import__("dataclasses").replace(spec, threads=args.threads)
    rows = run_experiment(spec)
    report = {
        "config": _resolved_config(args, "simulate"),
        "rows": len(rows),
        "out_path": spec.out_path,
        "seed": spec.seed,
    }
    _emit(report, args.out)
    return 0


def _write_curve(path: str, grid: np.ndarray, values: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("y,value\n")
        for g, v in zip(grid, values):
            fh.write(f"{g!r},{v!r}\n")


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="causalfn", description=__doc__)
    subs = parser.add_subparsers(dest="subcommand", required=True)
    for name in ("estimate", "band-estimate", "density-test", "kme-test", "cv"):
        sub = subs.add_parser(name)
        _common_flags(sub)
        sub.add_argument("data", help="CSV with header x1,...,xd,a,y")
    sim = subs.add_parser("simulate")
    _common_flags(sim)
    sim.add_argument("--config", required=True, help="experiment config JSON")
    args = parser.parse_args(argv)
    handlers = {
        "estimate": _cmd_estimate,
        "band-estimate": _cmd_band_estimate,
        "density-test": _cmd_density_test,
        "kme-test": _cmd_kme_test,
        "cv": _cmd_cv,
        "simulate": _cmd_simulate,
    }
    try:
        return handlers[args.subcommand](args)
    except (ValueError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
