"""Data-generating processes, analytic truths, and experiment runners
(MISE-vs-n, coverage, type-I/power) emitting CSV rows.

Covariates follow the confounded design: V ~ N(0_5, I_5),
X = V/2 + (V+1) 1{Y(1) > 0}, A ~ Bern(1/20 + 9/10 expit(X_1)),
Y = A Y(1) + (1-A) Y(0).
"""
from __future__ import annotations

import csv
import json
import multiprocessing as mp
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, gammaln

from .cv import CvConfig, cv_select
from .density import regularized_onestep
from .hilbert import Basis, RegSeq, sinc_kernel
from .inference import band_confidence_report, equality_test, mmd_test
from .nuisance import Dataset
from .rkhs import band_onestep

__all__ = [
    "BETA_MIXTURES",
    "DgpConfig",
    "TruthFn",
    "gen_data",
    "true_density",
    "sample_sinc_mixture",
    "mise",
    "run_experiment",
    "load_experiment_config",
]

BETA_MIXTURES = {
    "zero_both": ((2.0, 2.0), (3.0, 3.0), (4.0, 4.0)),
    "nonzero_both": ((1.0, 1.0), (8.0, 4.0), (4.0, 8.0)),
    "spike_left": ((1.0, 5.0), (5.0, 2.0), (4.0, 8.0)),
}

SINC_MUS = (-4.0, 0.0, 4.0)
SINC_SIGMAS = (2.0, 2.0, 1.0)

_VALIDATION_GRID = 10_000


def _beta_mixture_pdf(params, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = (y >= 0.0) & (y <= 1.0)
    yc = np.clip(y, 1e-300, 1.0 - 1e-16)
    for a, b in params:
        logpdf = (
            (a - 1.0) * np.log(yc)
            + (b - 1.0) * np.log1p(-yc)
            - (gammaln(a) + gammaln(b) - gammaln(a + b))
        )
        out += np.where(inside, np.exp(logpdf), 0.0) / len(params)
    # boundary conventions: Beta(1, b) and Beta(a, 1) are finite at the edges
    return out


def _sinc4(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-6
    xs = np.where(small, 1.0, x)
    s = np.where(small, 1.0 - x * x / 6.0, np.sin(xs) / xs)
    return s**4


def _sinc_mixture_pdf(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y, dtype=float)
    for mu, sig in zip(SINC_MUS, SINC_SIGMAS):
        out += 3.0 * _sinc4((y - mu) / sig) / (2.0 * np.pi * sig) / 3.0
    return out


def _cosine_span_pdf(coeffs, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    out = np.ones_like(y)
    for j, c in enumerate(coeffs, start=1):
        out += c * np.sqrt(2.0) * np.cos(j * np.pi * y)
    return out


def true_density(spec, y):
    """Analytic density of a q-spec at points y.

    Specs: a preset name from BETA_MIXTURES, "sinc", ("beta_mixture",
    params), or ("cosine", coeffs) for 1 + sum_j c_j sqrt(2) cos(j pi y).
    """
    if isinstance(spec, str):
        if spec == "sinc":
            return _sinc_mixture_pdf(y)
        if spec in BETA_MIXTURES:
            return _beta_mixture_pdf(BETA_MIXTURES[spec], y)
        raise ValueError(f"unknown density spec {spec!r}")
    tag = spec[0]
    if tag == "beta_mixture":
        return _beta_mixture_pdf(spec[1], y)
    if tag == "cosine":
        return _cosine_span_pdf(spec[1], y)
    raise ValueError(f"unknown density spec {spec!r}")


def _q0_density(q1_spec, q0_spec, y):
    if q0_spec == "same":
        return true_density(q1_spec, y)
    tag, k = q0_spec
    if tag != "alt":
        raise ValueError(f"unknown q0 spec {q0_spec!r}")
    return true_density(q1_spec, y) - np.cos(k**2 * np.pi * np.asarray(y, dtype=float))


@dataclass(frozen=True)
class DgpConfig:
    """Sampling configuration: q1 spec, q0 spec ('same' or ('alt', k)), n, seed."""

    q1: object
    q0: object = "same"
    n: int = 1000
    seed: int = 0
    independent_covariates: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.q0 != "same":
            grid = np.linspace(0.0, 1.0, _VALIDATION_GRID)
            q0 = _q0_density(self.q1, self.q0, grid)
            if q0.min() < -1e-12:
                raise ValueError(
                    "cosine perturbation yields a negative q0 density "
                    f"(min {q0.min():.4g}); rejected rather than clipped"
                )


@dataclass(frozen=True)
class TruthFn:
    """Analytic truths for a DGP: arm densities, their difference, and the
    bandlimited arm-1 truth."""

    q1_spec: object
    q0_spec: object = "same"

    def q1(self, y):
        return true_density(self.q1_spec, y)

    def q0(self, y):
        return _q0_density(self.q1_spec, self.q0_spec, y)

    def difference(self, y):
        return self.q1(y) - self.q0(y)

    def band_truth(self, points: np.ndarray, b: float, support: tuple = (-60.0, 60.0), step: float = 0.01) -> np.ndarray:
        """Bandlimited q1 at the requested points by dense quadrature."""
        grid = np.arange(support[0], support[1] + step, step)
        dens = self.q1(grid) * step
        points = np.asarray(points, dtype=float)
        out = np.empty(points.size)
        block = 64
        for start in range(0, points.size, block):
            pts = points[start : start + block]
            out[start : start + block] = sinc_kernel(pts[:, None], grid[None, :], b) @ dens
        return out


def sample_sinc_mixture(count: int, seed_or_rng) -> np.ndarray:
    """Sample the sinc^4 location-scale mixture by rejection.

    The base variable S with density 3 sinc^4(x) / (2 pi) is drawn with
    envelope proportional to min(1, x^-4), which dominates sinc^4.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    out = np.empty(count)
    filled = 0
    while filled < count:
        m = max(2 * (count - filled), 64)
        # envelope: with prob 3/4 uniform on [-1, 1], else |x| ~ Pareto(3) tail
        u = rng.uniform(size=m)
        tail = u >= 0.75
        x = rng.uniform(-1.0, 1.0, size=m)
        xt = (1.0 - rng.uniform(size=m)) ** (-1.0 / 3.0)
        x = np.where(tail, np.sign(rng.uniform(size=m) - 0.5) * xt, x)
        envelope = np.where(np.abs(x) > 1.0, np.abs(x) ** -4.0, 1.0)
        accept = rng.uniform(size=m) < _sinc4(x) / envelope
        take = x[accept][: count - filled]
        out[filled : filled + take.size] = take
        filled += take.size
    comp = rng.integers(0, 3, size=count)
    mus = np.asarray(SINC_MUS)[comp]
    sigs = np.asarray(SINC_SIGMAS)[comp]
    return sigs * out + mus


def _rejection_sample(pdf, lo: float, hi: float, count: int, rng: np.random.Generator) -> np.ndarray:
    grid = np.linspace(lo, hi, 4096)
    bound = float(pdf(grid).max()) * 1.05
    out = np.empty(count)
    filled = 0
    while filled < count:
        m = max(2 * (count - filled), 64)
        x = rng.uniform(lo, hi, size=m)
        accept = rng.uniform(0.0, bound, size=m) < pdf(x)
        take = x[accept][: count - filled]
        out[filled : filled + take.size] = take
        filled += take.size
    return out


def _sample_spec(spec, count: int, rng: np.random.Generator) -> np.ndarray:
    if spec == "sinc":
        return sample_sinc_mixture(count, rng)
    if isinstance(spec, str):
        params = BETA_MIXTURES[spec]
        comp = rng.integers(0, len(params), size=count)
        pars = np.asarray(params)[comp]
        return rng.beta(pars[:, 0], pars[:, 1])
    tag = spec[0]
    if tag == "beta_mixture":
        params = spec[1]
        comp = rng.integers(0, len(params), size=count)
        pars = np.asarray(params)[comp]
        return rng.beta(pars[:, 0], pars[:, 1])
    if tag == "cosine":
        return _rejection_sample(lambda y: _cosine_span_pdf(spec[1], y), 0.0, 1.0, count, rng)
    raise ValueError(f"unknown density spec {spec!r}")


def _gen_full(config: DgpConfig):
    """Dataset plus the latent potential outcomes (for diagnostics)."""
    rng = np.random.default_rng(config.seed)
    n = config.n
    y1 = _sample_spec(config.q1, n, rng)
    if config.q0 == "same":
        y0 = _sample_spec(config.q1, n, rng)
    else:
        y0 = _rejection_sample(lambda y: _q0_density(config.q1, config.q0, y), 0.0, 1.0, n, rng)
    v = rng.standard_normal((n, 5))
    ind = np.ones(n) if config.independent_covariates else (y1 > 0.0).astype(float)
    x = v / 2.0 + (v + 1.0) * ind[:, None]
    prop = 1.0 / 20.0 + 9.0 / 10.0 * expit(x[:, 0])
    a = (rng.uniform(size=n) < prop).astype(int)
    y = np.where(a == 1, y1, y0)
    return Dataset(x, a, y), y1, y0


def gen_data(config: DgpConfig) -> Dataset:
    """Draw a dataset from the confounded design for the configured DGP."""
    return _gen_full(config)[0]


def mise(est_values: np.ndarray, truth_values: np.ndarray, grid: np.ndarray) -> float:
    """Trapezoid integral of the squared error on a grid."""
    est_values = np.asarray(est_values, dtype=float)
    truth_values = np.asarray(truth_values, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if est_values.shape != truth_values.shape or est_values.shape != grid.shape:
        raise ValueError("grid mismatch in integrated squared error")
    return float(np.trapezoid((est_values - truth_values) ** 2, grid))


# ---------------------------------------------------------------------------
# Experiment harness


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    q1: object
    q0: object = "same"
    estimators: tuple = ("onestep",)
    n_list: tuple = (1000,)
    reps: int = 200
    alpha: float = 0.05
    seed: int = 0
    out_path: str | None = None
    params: dict = field(default_factory=dict)
    threads: int = 1


def _derive_seed(seed: int, n: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, n, rep]).generate_state(1)[0])


def _parse_beta(label, k_max: int) -> RegSeq:
    if isinstance(label, RegSeq):
        return label
    if label.startswith("hard:"):
        return RegSeq.hard(int(label.split(":")[1]))
    if label.startswith("rational:"):
        body = dict(part.split("=") for part in label.split(":")[1].split(","))
        return RegSeq.rational(float(body["c"]), float(body["p"]))
    raise ValueError(f"unknown beta spec {label!r}")


def _rep_mise_density(spec: ExperimentSpec, n: int, rep: int) -> list:
    p = spec.params
    seed = _derive_seed(spec.seed, n, rep)
    data = gen_data(DgpConfig(spec.q1, spec.q0, n, seed, p.get("independent_covariates", False)))
    basis = Basis(p.get("basis", "cosine"), p.get("kmax", 64))
    grid = np.linspace(0.0, 1.0, p.get("grid", 500))
    truth = TruthFn(spec.q1, spec.q0).q1(grid)
    beta_spec = p.get("beta", "cv")
    if beta_spec == "cv":
        k_top = p.get("cv_k_top", 16)
        selected, basis_sel = cv_select(data, CvConfig(tuple(RegSeq.hard(k) for k in range(k_top + 1)), seed=seed), basis, learner=p.get("learner", "logistic"), grid=p.get("grid", 500))
        beta = selected
        basis = basis_sel
    else:
        beta = _parse_beta(beta_spec, basis.k_max)
    fit = regularized_onestep(
        data, basis, beta, folds=p.get("folds", 2), seed=seed, learner=p.get("learner", "logistic"), grid=p.get("grid", 500)
    )
    rows = []
    for est in spec.estimators:
        values = fit.plugin(grid) if est == "plugin" else fit.estimate(grid)
        rows.append({"dgp": str(spec.q1), "estimator": est, "n": n, "rep": rep, "metric": "mise", "value": mise(values, truth, grid), "seed": seed})
    return rows


def _rep_mise_band(spec: ExperimentSpec, n: int, rep: int) -> list:
    p = spec.params
    seed = _derive_seed(spec.seed, n, rep)
    data = gen_data(DgpConfig(spec.q1, spec.q0, n, seed))
    b = p.get("bandlimit", 2.0)
    fit = band_onestep(
        data,
        b=b,
        folds=p.get("folds", 2),
        seed=seed,
        learner=p.get("learner", "nw"),
        m=p.get("band_m", 500),
        dens_grid=p.get("grid", 500),
        eps=p.get("eps", 0.01),
    )
    truth = TruthFn(spec.q1, spec.q0).band_truth(fit.grid.points, b)
    truth_coords = truth * fit.grid.scales
    rows = []
    for est in spec.estimators:
        coords = fit.plugin.coords() if est == "plugin" else fit.estimate_coords()
        err = coords - truth_coords
        rows.append({"dgp": "sinc", "estimator": est, "n": n, "rep": rep, "metric": "mise", "value": float(err @ err), "seed": seed})
    return rows


def _rep_coverage_band(spec: ExperimentSpec, n: int, rep: int) -> list:
    p = spec.params
    seed = _derive_seed(spec.seed, n, rep)
    data = gen_data(DgpConfig(spec.q1, spec.q0, n, seed))
    b = p.get("bandlimit", 2.0)
    fit = band_onestep(
        data,
        b=b,
        folds=p.get("folds", 2),
        seed=seed,
        learner=p.get("learner", "nw"),
        m=p.get("band_m", 500),
        dens_grid=p.get("grid", 500),
        eps=p.get("eps", 0.01),
    )
    report = band_confidence_report(fit, alpha=spec.alpha, b_reps=p.get("boot", 500), seed=seed)
    truth = TruthFn(spec.q1, spec.q0).band_truth(fit.grid.points, b)
    err = report.coords - truth * fit.grid.scales
    covered = float(err @ err) <= report.threshold.value / n
    return [{"dgp": "sinc", "estimator": "band-onestep", "n": n, "rep": rep, "metric": "covered", "value": float(covered), "seed": seed}]


def _rep_test(spec: ExperimentSpec, n: int, rep: int) -> list:
    p = spec.params
    seed = _derive_seed(spec.seed, n, rep)
    data = gen_data(DgpConfig(spec.q1, spec.q0, n, seed))
    rows = []
    for est in spec.estimators:
        if est == "density-test":
            basis = Basis(p.get("basis", "cosine"), p.get("kmax", 64))
            beta = _parse_beta(p.get("beta", "rational:c=5,p=2"), basis.k_max)
            res = equality_test(
                data,
                basis,
                beta,
                omega=p.get("omega", "identity"),
                lam=p.get("lambda", 0.5),
                alpha=spec.alpha,
                b_reps=p.get("boot", 500),
                seed=seed,
                learner=p.get("learner", "logistic"),
                grid=p.get("grid", 500),
                eps=p.get("eps", 0.01),
            )
        elif est == "mmd-test":
            res = mmd_test(
                data,
                bw_mult=p.get("kernel_bw_mult", 1.0),
                alpha=spec.alpha,
                b_reps=p.get("boot", 500),
                seed=seed,
                learner=p.get("learner", "logistic"),
                grid=p.get("grid", 500),
                eps=p.get("eps", 0.01),
            )
        else:
            raise ValueError(f"unknown test estimator {est!r}")
        rows.append({"dgp": f"{spec.q1}|{spec.q0}", "estimator": est, "n": n, "rep": rep, "metric": "rejected", "value": float(res["reject"]), "seed": seed})
    return rows


def _rep_width_ratio(spec: ExperimentSpec, n: int, rep: int) -> list:
    # sup-norm band radius versus the efficient pointwise Wald interval at 0
    from scipy.stats import norm as snorm

    p = spec.params
    seed = _derive_seed(spec.seed, n, rep)
    data = gen_data(DgpConfig(spec.q1, spec.q0, n, seed))
    b = p.get("bandlimit", 2.0)
    fit = band_onestep(
        data,
        b=b,
        folds=p.get("folds", 2),
        seed=seed,
        learner=p.get("learner", "logistic"),
        m=p.get("band_m", 500),
        dens_grid=p.get("grid", 500),
        eps=p.get("eps", 0.01),
    )
    report = band_confidence_report(fit, alpha=spec.alpha, b_reps=p.get("boot", 500), seed=seed)
    point = p.get("eval_point", 0.0)
    k0 = sinc_kernel(point, fit.grid.points, b) * fit.grid.scales
    phi0 = fit.eif_coords() @ k0
    s0 = 0.0
    for j in np.unique(fit.fold_of_row):
        s0 += np.mean(phi0[fit.fold_of_row == j] ** 2) / np.unique(fit.fold_of_row).size
    wald_half = snorm.ppf(1.0 - spec.alpha / 2.0) * np.sqrt(s0 / n)
    return [{"dgp": "sinc", "estimator": "band-onestep", "n": n, "rep": rep, "metric": "width_ratio", "value": float(report.radius / wald_half), "seed": seed}]


def _rep_cv_oracle(spec: ExperimentSpec, n: int, rep: int) -> list:
    p = spec.params
    seed = _derive_seed(spec.seed, n, rep)
    data = gen_data(DgpConfig(spec.q1, spec.q0, n, seed, p.get("independent_covariates", False)))
    k_top = p.get("cv_k_top", 16)
    basis = Basis(p.get("basis", "cosine"), k_top + 1)
    selected, _ = cv_select(
        data,
        CvConfig(tuple(RegSeq.hard(k) for k in range(k_top + 1)), seed=seed),
        basis,
        learner=p.get("learner", "logistic"),
        grid=p.get("grid", 500),
    )
    grid = np.linspace(0.0, 1.0, p.get("grid", 500))
    truth = TruthFn(spec.q1, spec.q0).q1(grid)
    fit = regularized_onestep(
        data, basis, RegSeq.hard(0), folds=p.get("folds", 2), seed=seed, learner=p.get("learner", "logistic"), grid=p.get("grid", 500)
    )
    bmat = basis.eval_matrix(grid)
    mises = {}
    for k in range(k_top + 1):
        damp = RegSeq.hard(k).materialize(basis.k_max)
        est = bmat @ (fit.plugin_coeffs + damp * fit.correction_coeffs)
        mises[k] = mise(est, truth, grid)
    ratio = mises[selected.k_threshold] / min(mises.values())
    return [
        {"dgp": str(spec.q1), "estimator": "cv-onestep", "n": n, "rep": rep, "metric": "oracle_ratio", "value": float(ratio), "seed": seed},
        {"dgp": str(spec.q1), "estimator": "cv-onestep", "n": n, "rep": rep, "metric": "selected_k", "value": float(selected.k_threshold), "seed": seed},
    ]


_KIND_WORKERS = {
    "mise-density": _rep_mise_density,
    "mise-band": _rep_mise_band,
    "coverage-band": _rep_coverage_band,
    "test": _rep_test,
    "band-width-ratio": _rep_width_ratio,
    "cv-oracle": _rep_cv_oracle,
}


def _worker(args):
    spec, n, rep = args
    return _KIND_WORKERS[spec.kind](spec, n, rep)


def run_experiment(spec: ExperimentSpec) -> list:
    """Run all (n, rep) cells of an experiment; returns row dicts sorted by
    (n, rep, estimator) and optionally writes them as CSV."""
    if spec.kind not in _KIND_WORKERS:
        raise ValueError(f"unknown experiment kind {spec.kind!r}")
    tasks = [(spec, n, rep) for n in spec.n_list for rep in range(spec.reps)]
    if spec.threads > 1 and len(tasks) > 1:
        with mp.get_context("fork").Pool(spec.threads) as pool:
            nested = pool.map(_worker, tasks, chunksize=max(1, len(tasks) // (8 * spec.threads)))
    else:
        nested = [_worker(t) for t in tasks]
    rows = [row for group in nested for row in group]
    rows.sort(key=lambda r: (r["n"], r["rep"], r["estimator"]))
    if spec.out_path:
        write_rows_csv(spec.out_path, rows)
    return rows


def write_rows_csv(path: str, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["dgp", "estimator", "n", "rep", "metric", "value", "seed"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def load_experiment_config(path: str) -> ExperimentSpec:
    """Load an experiment spec from JSON."""
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    q1 = cfg["dgp"]["q1"]
    if isinstance(q1, list):
        q1 = (q1[0], tuple(tuple(p) if isinstance(p, list) else p for p in q1[1]))
    q0 = cfg["dgp"].get("q0", "same")
    if isinstance(q0, list):
        q0 = (q0[0], q0[1])
    return ExperimentSpec(
        kind=cfg["kind"],
        q1=q1,
        q0=q0,
        estimators=tuple(cfg.get("estimators", ["onestep"])),
        n_list=tuple(cfg.get("n_list", [1000])),
        reps=int(cfg.get("reps", 200)),
        alpha=float(cfg.get("alpha", 0.05)),
        seed=int(cfg.get("seed", 0)),
        out_path=cfg.get("out_path"),
        params=cfg.get("params", {}),
        threads=int(cfg.get("threads", os.cpu_count() or 1)),
    )
