"""Counterfactual density estimators in coefficient space: plug-in,
influence-operator corrections, cross-fitted regularized one-step,
projection-form one-step, and the two-arm density difference.

All objects are expansions against a declared orthonormal basis, truncated
at the basis order.  Per-observation correction coefficients are cached in
an (n, k_max) matrix (row i computed from the nuisance fit of the fold
complement of row i) so inference and selection never refit nuisances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hilbert import Basis, L2Fn, RegSeq
from .nuisance import (
    Dataset,
    FoldFit,
    FoldSplit,
    PropensityModel,
    fit_fold_bundles,
    split_folds,
)

__all__ = [
    "DensityFit",
    "plugin_coefficients",
    "eif_coefficient",
    "eif_matrix",
    "regularized_eif_coeffs",
    "regularized_onestep",
    "projection_onestep",
    "density_difference",
    "nonnegative_density_projection",
]


def _arm_pieces(data: Dataset, fit: FoldFit, basis: Basis, arm: int):
    """Per-fold plug-in coefficients and per-row correction coefficients.

    Returns (plugin, eif_rows): plugin is the coefficient expansion of the
    plug-in averaged over the training-fold covariates; eif_rows has one
    row per evaluation-fold observation with the influence-operator values
    at each basis element.
    """
    dens = fit.density(arm)
    m_train = dens.mean_basis(data.x[fit.train_idx], basis)
    plugin = m_train.mean(axis=0)

    xe = data.x[fit.eval_idx]
    ae = data.a[fit.eval_idx]
    ye = data.y[fit.eval_idx]
    g1 = fit.propensity.predict(xe)
    g = g1 if arm == 1 else 1.0 - g1
    ind = (ae == arm).astype(float)
    m_eval = dens.mean_basis(xe, basis)
    h_eval = basis.eval_matrix(ye)
    eif_rows = (ind / g)[:, None] * (h_eval - m_eval) + (m_eval - plugin[None, :])
    return plugin, eif_rows


@dataclass(frozen=True)
class DensityFit:
    """Cross-fitted density estimate plus cached correction coefficients."""

    basis: Basis
    beta: RegSeq
    plugin_coeffs: np.ndarray
    correction_coeffs: np.ndarray
    eif: np.ndarray
    fold_of_row: np.ndarray
    kind: str
    per_fold_plugin: tuple
    per_fold_correction: tuple

    @property
    def n(self) -> int:
        return self.eif.shape[0]

    @property
    def onestep_coeffs(self) -> np.ndarray:
        """Unregularized one-step coefficients (plug-in plus correction)."""
        return self.plugin_coeffs + self.correction_coeffs

    @property
    def estimate(self) -> L2Fn:
        b = self.beta.materialize(self.basis.k_max)
        if self.kind == "projection":
            return L2Fn(self.basis, b * self.onestep_coeffs)
        return L2Fn(self.basis, self.plugin_coeffs + b * self.correction_coeffs)

    @property
    def plugin(self) -> L2Fn:
        return L2Fn(self.basis, self.plugin_coeffs)

    def regularized_eif(self) -> np.ndarray:
        """Per-observation coefficients of the beta-regularized influence values."""
        return self.eif * self.beta.materialize(self.basis.k_max)[None, :]

    def sigma_beta(self) -> float:
        """Cross-fitted estimate of the regularized influence scale."""
        reg = self.regularized_eif()
        return float(np.sqrt(np.mean(np.sum(reg * reg, axis=1))))


def plugin_coefficients(fit: FoldFit, data: Dataset, basis: Basis, arm: int = 1) -> L2Fn:
    """Plug-in coefficient expansion for a single nuisance fit."""
    if fit.train_idx.size == 0:
        raise ValueError("empty evaluation sample for the plug-in average")
    plugin, _ = _arm_pieces(data, fit, basis, arm)
    return L2Fn(basis, plugin)


def eif_coefficient(z: tuple, k: int, fit: FoldFit, data: Dataset, basis: Basis, arm: int = 1) -> float:
    """Influence-operator value at basis element k for one observation z = (x, a, y)."""
    if not 1 <= k <= basis.k_max:
        raise ValueError(f"basis index k={k} outside 1..{basis.k_max}")
    x, a, y = z
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dens = fit.density(arm)
    m_train = dens.mean_basis(data.x[fit.train_idx], basis)[:, k - 1]
    m_x = dens.mean_basis(x, basis)[0, k - 1]
    g1 = float(fit.propensity.predict(x)[0])
    g = g1 if arm == 1 else 1.0 - g1
    ind = 1.0 if int(a) == arm else 0.0
    from .hilbert import eval_basis

    return ind / g * (eval_basis(basis, k, float(y)) - m_x) + (m_x - float(m_train.mean()))


def regularized_eif_coeffs(z: tuple, beta: RegSeq, fit: FoldFit, data: Dataset, basis: Basis, arm: int = 1) -> np.ndarray:
    """Coefficient vector of the beta-regularized influence value at z."""
    b = beta.materialize(basis.k_max)
    raw = np.array([eif_coefficient(z, k, fit, data, basis, arm) for k in range(1, basis.k_max + 1)])
    return b * raw


def eif_matrix(data: Dataset, fit: FoldFit, basis: Basis, arm: int = 1) -> np.ndarray:
    """Influence-operator coefficients for all evaluation-fold rows."""
    _, rows = _arm_pieces(data, fit, basis, arm)
    return rows


def _build(data, basis, beta, folds, seed, learner, grid, split, kind, arm, propensity, bandwidth, x_bandwidth=None, eps=0.01):
    if split is None:
        split = split_folds(data.n, folds, seed)
    arms = (0, 1) if arm == "difference" else (arm,)
    if arm == "difference" and (data.a.min() == data.a.max()):
        raise ValueError("density difference needs both treatment arms")
    bundles = fit_fold_bundles(
        data, split, learner=learner, grid=grid, arms=arms, bandwidth=bandwidth, propensity=propensity,
        x_bandwidth=x_bandwidth, eps=eps,
    )
    k_max = basis.k_max
    plugin = np.zeros(k_max)
    correction = np.zeros(k_max)
    eif = np.zeros((data.n, k_max))
    per_plugin, per_corr = [], []
    for fit in bundles:
        if arm == "difference":
            p1, r1 = _arm_pieces(data, fit, basis, 1)
            p0, r0 = _arm_pieces(data, fit, basis, 0)
            p, rows = p1 - p0, r1 - r0
        else:
            p, rows = _arm_pieces(data, fit, basis, arm)
        eif[fit.eval_idx] = rows
        plugin += p / split.j
        correction += rows.mean(axis=0) / split.j
        per_plugin.append(p)
        per_corr.append(rows.mean(axis=0))
    return DensityFit(
        basis=basis,
        beta=beta,
        plugin_coeffs=plugin,
        correction_coeffs=correction,
        eif=eif,
        fold_of_row=split.assignment.copy(),
        kind=kind,
        per_fold_plugin=tuple(per_plugin),
        per_fold_correction=tuple(per_corr),
    )


def regularized_onestep(
    data: Dataset,
    basis: Basis,
    beta: RegSeq,
    folds: int = 2,
    seed: int = 0,
    learner: str = "logistic",
    grid: int | np.ndarray = 500,
    split: FoldSplit | None = None,
    arm: int = 1,
    propensity: PropensityModel | None = None,
    bandwidth: float | None = None,
    x_bandwidth: float | None = None,
    eps: float = 0.01,
) -> DensityFit:
    """Cross-fitted beta-regularized one-step estimator of the arm-a
    counterfactual density (plug-in plus damped correction)."""
    return _build(data, basis, beta, folds, seed, learner, grid, split, "regularized", arm, propensity, bandwidth, x_bandwidth, eps)


def projection_onestep(
    data: Dataset,
    basis: Basis,
    beta: RegSeq,
    folds: int = 2,
    seed: int = 0,
    learner: str = "logistic",
    grid: int | np.ndarray = 500,
    split: FoldSplit | None = None,
    arm: int = 1,
    propensity: PropensityModel | None = None,
    bandwidth: float | None = None,
    x_bandwidth: float | None = None,
    eps: float = 0.01,
) -> DensityFit:
    """One-step estimator of the shrunk parameter: the shrinkage map is
    applied to each plug-in before the correction, so every coefficient is
    damped by beta_k."""
    return _build(data, basis, beta, folds, seed, learner, grid, split, "projection", arm, propensity, bandwidth, x_bandwidth, eps)


def density_difference(
    data: Dataset,
    basis: Basis,
    beta: RegSeq,
    folds: int = 2,
    seed: int = 0,
    learner: str = "logistic",
    grid: int | np.ndarray = 500,
    split: FoldSplit | None = None,
    kind: str = "projection",
    propensity: PropensityModel | None = None,
    bandwidth: float | None = None,
    eps: float = 0.01,
) -> DensityFit:
    """Estimator of the treated-minus-control density difference; plug-in
    and influence values are arm-wise differences."""
    return _build(data, basis, beta, folds, seed, learner, grid, split, kind, "difference", propensity, bandwidth, None, eps)


def nonnegative_density_projection(values: np.ndarray, dy: float) -> np.ndarray:
    """Project grid values onto nonnegative functions of unit mass
    (optional post-processing; estimators report raw values by default)."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(-v.max()), float(v.max())
    for _ in range(200):
        c = 0.5 * (lo + hi)
        mass = np.clip(v - c, 0.0, None).sum() * dy
        if mass > 1.0:
            lo = c
        else:
            hi = c
    return np.clip(v - 0.5 * (lo + hi), 0.0, None)
