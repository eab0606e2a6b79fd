"""Quadratic-form confidence sets and hypothesis tests: standardizers,
bootstrap and conservative thresholds, elliptical sets for unregularized
parameters, the density equality test, the MMD test, and uniform bands
for the bandlimited estimator.

All thresholds operate on cached per-observation influence coordinates
(with fold labels), so no bootstrap step ever refits a nuisance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .hilbert import L2Fn, RegSeq
from .density import DensityFit, density_difference
from .nuisance import Dataset
from .rkhs import BandOneStepFit, GaussianKernel, kme_onestep, median_heuristic, pivoted_chol

__all__ = [
    "Standardizer",
    "ThresholdEstimate",
    "ConfidenceReport",
    "quad_form",
    "build_standardizer",
    "bootstrap_threshold",
    "szekely_threshold",
    "cs_membership",
    "cs_regularized_membership",
    "equality_test",
    "mmd_test",
    "band_uniform_radius",
    "band_confidence_report",
]

DEFAULT_BOOT_REPS = 1000
DEFAULT_LAMBDA = 0.5


@dataclass(frozen=True)
class Standardizer:
    """Positive-definite quadratic form w(v) = v' Omega v.

    ``identity`` keeps Omega = I implicit; the Wald kinds hold the
    materialized regularized inverse of the (correlation-scaled) influence
    second-moment matrix.
    """

    kind: str
    lam: float = 1.0
    omega: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "wald-cov", "wald-corr"):
            raise ValueError(f"unknown standardizer kind {self.kind!r}")


def quad_form(v: np.ndarray, standardizer: Standardizer) -> float:
    v = np.asarray(v, dtype=float)
    if standardizer.omega is None:
        return float(v @ v)
    if standardizer.omega.shape[0] != v.shape[0]:
        raise ValueError("dimension mismatch between vector and standardizer")
    return float(v @ standardizer.omega @ v)


def _second_moment(eif: np.ndarray, fold_of_row: np.ndarray) -> np.ndarray:
    m = eif.shape[1]
    sigma = np.zeros((m, m))
    folds = np.unique(fold_of_row)
    for j in folds:
        rows = eif[fold_of_row == j]
        sigma += rows.T @ rows / rows.shape[0]
    return sigma / folds.size


def build_standardizer(
    eif: np.ndarray, fold_of_row: np.ndarray, kind: str = "identity", lam: float = DEFAULT_LAMBDA
) -> Standardizer:
    """Build Omega = [(1 - lam) Sigma + lam I]^{-1} from cross-fitted
    influence coordinates (Sigma is the fold-averaged second moment, or its
    correlation-scaled version for ``wald-corr``)."""
    if kind == "identity":
        return Standardizer("identity", 1.0, None)
    if not 0.0 < lam <= 1.0:
        raise ValueError("lambda must lie in (0, 1]")
    eif = np.asarray(eif, dtype=float)
    if not np.all(np.isfinite(eif)):
        raise ValueError("non-finite influence coordinate")
    m = eif.shape[1]
    if kind == "wald-cov":
        sigma = _second_moment(eif, fold_of_row)
    elif kind == "wald-corr":
        sigma = np.zeros((m, m))
        folds = np.unique(fold_of_row)
        for j in folds:
            rows = eif[fold_of_row == j]
            s = rows.T @ rows / rows.shape[0]
            d = np.sqrt(np.diag(s))
            d = np.where(d <= 0.0, 1.0, d)
            sigma += s / np.outer(d, d)
        sigma /= folds.size
    else:
        raise ValueError(f"unknown standardizer kind {kind!r}")
    omega = np.linalg.inv((1.0 - lam) * sigma + lam * np.eye(m))
    omega = 0.5 * (omega + omega.T)
    return Standardizer(kind, lam, omega)


@dataclass(frozen=True)
class ThresholdEstimate:
    method: str
    value: float
    alpha: float
    seed: int | None = None
    b_reps: int | None = None

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("threshold must be nonnegative")


def _bootstrap_draws(
    eif: np.ndarray, fold_of_row: np.ndarray, b_reps: int, seed: int, quad_matrix: np.ndarray | None
) -> np.ndarray:
    n, _ = eif.shape
    folds = np.unique(fold_of_row)
    idx_by_fold = [np.flatnonzero(fold_of_row == j) for j in folds]
    # Each replicate has its own counter-based stream so the result does not
    # depend on evaluation order.
    children = np.random.SeedSequence(seed).spawn(b_reps)
    delta = np.zeros((b_reps, n))
    for b, child in enumerate(children):
        rng = np.random.Generator(np.random.Philox(child))
        for idx in idx_by_fold:
            nj = idx.size
            counts = rng.multinomial(nj, np.full(nj, 1.0 / nj))
            delta[b, idx] = (counts - 1.0) / nj
    v = (math.sqrt(n) / folds.size) * (delta @ eif)
    if quad_matrix is None:
        return np.einsum("bm,bm->b", v, v)
    return np.einsum("bm,bm->b", v @ quad_matrix, v)


def bootstrap_threshold(
    eif: np.ndarray,
    fold_of_row: np.ndarray,
    alpha: float = 0.05,
    b_reps: int = DEFAULT_BOOT_REPS,
    seed: int = 0,
    standardizer: Standardizer | None = None,
) -> ThresholdEstimate:
    """Swapped-fold multiplier-free bootstrap threshold.

    Each replicate resamples every fold's rows (with replacement) from the
    cached influence coordinates of that fold's held-out fit, forms the
    centered fold-mean contrast scaled by sqrt(n), and evaluates the
    quadratic form; the returned value is the empirical (1 - alpha)
    quantile over the replicates.
    """
    if b_reps < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    eif = np.asarray(eif, dtype=float)
    q = None if standardizer is None or standardizer.omega is None else standardizer.omega
    draws = _bootstrap_draws(eif, np.asarray(fold_of_row), b_reps, seed, q)
    order = np.sort(draws)
    rank = min(b_reps - 1, max(0, math.ceil((1.0 - alpha) * b_reps) - 1))
    return ThresholdEstimate("bootstrap", float(order[rank]), alpha, seed, b_reps)


def szekely_threshold(
    eif: np.ndarray,
    fold_of_row: np.ndarray,
    alpha: float = 0.05,
    standardizer: Standardizer | None = None,
) -> ThresholdEstimate:
    """Conservative bootstrap-free threshold: the chi-squared(1) quantile
    times the cross-fitted mean squared influence norm.  Only valid for the
    spherical (identity) quadratic form and alpha <= 0.2."""
    if alpha > 0.2:
        raise ValueError("conservative threshold requires alpha <= 0.2")
    if standardizer is not None and standardizer.kind != "identity":
        raise ValueError("conservative threshold requires the identity standardizer")
    eif = np.asarray(eif, dtype=float)
    fold_of_row = np.asarray(fold_of_row)
    folds = np.unique(fold_of_row)
    s2 = 0.0
    for j in folds:
        rows = eif[fold_of_row == j]
        s2 += float(np.mean(np.sum(rows * rows, axis=1))) / folds.size
    return ThresholdEstimate("szekely", float(chi2.ppf(1.0 - alpha, df=1) * s2), alpha, None, None)


@dataclass(frozen=True)
class ConfidenceReport:
    """Snapshot of a quadratic-form confidence set in fixed coordinates."""

    coords: np.ndarray
    standardizer: Standardizer
    threshold: ThresholdEstimate
    n: int
    radius: float | None = None


def cs_membership(h_coords: np.ndarray, report: ConfidenceReport) -> bool:
    """h belongs to the set iff w(est - h) <= zeta / n (boundary inclusive)."""
    v = report.coords - np.asarray(h_coords, dtype=float)
    return quad_form(v, report.standardizer) <= report.threshold.value / report.n


def cs_regularized_membership(
    h: L2Fn, fit: DensityFit, beta: RegSeq, zeta: float, k_star: int | None = None
) -> bool:
    """Membership in the stretched-preimage confidence set for the
    unregularized parameter: sum_{k<=K*} beta_k^2 (c_k - <h, h_k>)^2 <= zeta/n,
    where c are the unregularized one-step coefficients.  Truncating the sum
    only enlarges the set."""
    k_max = fit.basis.k_max
    if k_star is None:
        k_star = k_max
    if not 1 <= k_star <= k_max:
        raise ValueError(f"k_star must lie in 1..{k_max}")
    b = beta.materialize(k_max)[:k_star]
    if np.any(b <= 0.0):
        raise ValueError("preimage membership needs beta_k > 0 up to k_star")
    diff = fit.onestep_coeffs[:k_star] - h.coeffs[:k_star]
    return float(np.sum((b * diff) ** 2)) <= zeta / fit.n


def _check_fixed_beta(beta: RegSeq, allow_data_selected: bool) -> None:
    if beta.data_selected and not allow_data_selected:
        raise ValueError(
            "this regularization sequence was selected by cross-validation; "
            "inference requires a fixed beta (pass allow_data_selected_beta=True to override)"
        )


def equality_test(
    data: Dataset,
    basis,
    beta: RegSeq,
    omega: str = "identity",
    lam: float = DEFAULT_LAMBDA,
    alpha: float = 0.05,
    b_reps: int = DEFAULT_BOOT_REPS,
    seed: int = 0,
    learner: str = "logistic",
    folds: int = 2,
    grid: int = 500,
    threshold: str = "bootstrap",
    k_star: int | None = None,
    allow_data_selected_beta: bool = False,
    fit: DensityFit | None = None,
    eps: float = 0.01,
) -> dict:
    """Test Q(1) = Q(0) by checking whether zero lies in the confidence set
    for the density difference (built from the projection-form one-step)."""
    _check_fixed_beta(beta, allow_data_selected_beta)
    if threshold == "szekely" and omega != "identity":
        raise ValueError("the conservative threshold is only available with the identity standardizer")
    if fit is None:
        fit = density_difference(
            data, basis, beta, folds=folds, seed=seed, learner=learner, grid=grid, kind="projection", eps=eps
        )
    k_max = basis.k_max
    if k_star is None:
        k_star = k_max
    reg_eif = fit.regularized_eif()[:, :k_star]
    std = build_standardizer(reg_eif, fit.fold_of_row, omega, lam)
    if threshold == "bootstrap":
        zeta = bootstrap_threshold(reg_eif, fit.fold_of_row, alpha, b_reps, seed, std)
    elif threshold == "szekely":
        zeta = szekely_threshold(reg_eif, fit.fold_of_row, alpha, std)
    else:
        raise ValueError(f"unknown threshold method {threshold!r}")
    v = fit.estimate.coeffs[:k_star]
    statistic = fit.n * quad_form(v, std)
    return {
        "estimator": "density-difference",
        "alpha": alpha,
        "zeta_hat": zeta.value,
        "method": zeta.method,
        "omega_kind": omega,
        "lambda": lam,
        "reject": bool(statistic > zeta.value),
        "statistic": statistic,
        "seed": seed,
        "B": zeta.b_reps,
        "sigma_beta": fit.sigma_beta(),
        "n": fit.n,
        "beta": beta.label(),
    }


def mmd_test(
    data: Dataset,
    bw_mult: float = 1.0,
    alpha: float = 0.05,
    b_reps: int = DEFAULT_BOOT_REPS,
    seed: int = 0,
    learner: str = "logistic",
    folds: int = 2,
    grid: int = 500,
    eps: float = 0.01,
) -> dict:
    """Gaussian-kernel MMD test of Q(1) = Q(0) via the one-step embedding
    difference.  Gram quadratic forms go through a low-rank pivoted
    Cholesky factor of the anchor Gram matrix."""
    if data.a.min() == data.a.max():
        raise ValueError("MMD test needs both treatment arms")
    kernel = GaussianKernel(median_heuristic(data.y, bw_mult))
    kfit = kme_onestep(data, kernel, folds=folds, seed=seed, learner=learner, arm="difference", grid=grid, eps=eps)
    lfac = pivoted_chol(kfit.anchors, kernel)
    coords = kfit.eif_weights @ lfac
    est = kfit.est_weights @ lfac
    statistic = kfit.anchors.size * float(est @ est)
    zeta = bootstrap_threshold(coords, kfit.fold_of_row, alpha, b_reps, seed)
    return {
        "estimator": "kme-difference",
        "alpha": alpha,
        "zeta_hat": zeta.value,
        "method": "bootstrap",
        "omega_kind": "identity",
        "lambda": 1.0,
        "reject": bool(statistic > zeta.value),
        "statistic": statistic,
        "seed": seed,
        "B": b_reps,
        "kernel_bandwidth": kernel.bandwidth,
        "n": data.n,
    }


def band_uniform_radius(zeta: float, b: float, n: int) -> float:
    """Radius (b zeta / (n pi))^{1/2} of the sup-norm band implied by a
    spherical confidence set for the bandlimited density."""
    if zeta < 0:
        raise ValueError("threshold must be nonnegative")
    return math.sqrt(b * zeta / (n * math.pi))


def uniform_radius(report: ConfidenceReport, b: float) -> float:
    """Uniform-band radius from a spherical report; other standardizers do
    not imply a sup-norm band."""
    if report.standardizer.kind != "identity":
        raise ValueError("uniform band requires the spherical (identity) confidence set")
    return band_uniform_radius(report.threshold.value, b, report.n)


def band_confidence_report(
    fit: BandOneStepFit,
    alpha: float = 0.05,
    b_reps: int = DEFAULT_BOOT_REPS,
    seed: int = 0,
    threshold: str = "bootstrap",
) -> ConfidenceReport:
    """Spherical confidence set for the bandlimited density in the
    estimator's own grid coordinates, plus the implied uniform band."""
    coords = fit.eif_coords()
    n = coords.shape[0]
    std = Standardizer("identity")
    if threshold == "bootstrap":
        zeta = bootstrap_threshold(coords, fit.fold_of_row, alpha, b_reps, seed, std)
    elif threshold == "szekely":
        zeta = szekely_threshold(coords, fit.fold_of_row, alpha, std)
    else:
        raise ValueError(f"unknown threshold method {threshold!r}")
    return ConfidenceReport(
        coords=fit.estimate_coords(),
        standardizer=std,
        threshold=zeta,
        n=n,
        radius=band_uniform_radius(zeta.value, fit.b, n),
    )
