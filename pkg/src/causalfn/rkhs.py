"""RKHS-valued one-step estimators: the bandlimited counterfactual density
(sinc kernel, grid representation) and the counterfactual kernel mean
embedding (anchor-plus-weights representation with Gram arithmetic).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .hilbert import QuadGrid, gaussian_kernel, sinc_kernel
from .nuisance import (
    Dataset,
    FoldFit,
    FoldSplit,
    PropensityModel,
    fit_fold_bundles,
    split_folds,
)

logger = logging.getLogger(__name__)

__all__ = [
    "GaussianKernel",
    "median_heuristic",
    "KmeElement",
    "kme_inner",
    "kme_norm",
    "cond_mean_feature",
    "BandFn",
    "make_band_grid",
    "band_plugin",
    "band_eif_rows",
    "band_onestep",
    "BandOneStepFit",
    "kme_plugin",
    "kme_eif",
    "kme_onestep",
    "KmeFit",
    "pivoted_chol",
]

DEFAULT_BAND_GRID_M = 2048
ANCHOR_CAP_FACTOR = 10
ANCHOR_PRUNE_REL_TOL = 1e-12


# ---------------------------------------------------------------------------
# Kernel mean embeddings


@dataclass(frozen=True)
class GaussianKernel:
    bandwidth: float

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("kernel bandwidth must be positive")

    def __call__(self, y, y_tilde):
        return gaussian_kernel(y, y_tilde, self.bandwidth)


def median_heuristic(y: np.ndarray, mult: float = 1.0) -> float:
    """Median pairwise distance of outcomes, times a multiplier."""
    y = np.asarray(y, dtype=float)
    d = np.abs(y[:, None] - y[None, :])[np.triu_indices(y.size, k=1)]
    med = float(np.median(d))
    if med <= 0:
        raise ValueError("median pairwise distance is zero")
    return mult * med


@dataclass(frozen=True)
class KmeElement:
    """RKHS element sum_i w_i K_{y_i} stored as anchors plus weights."""

    anchors: np.ndarray
    weights: np.ndarray
    kernel: GaussianKernel

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if a.shape != w.shape or a.ndim != 1:
            raise ValueError("anchors and weights must be 1-d arrays of equal length")
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "weights", w)

    def simplify(self, cap: int | None = None, rel_tol: float = ANCHOR_PRUNE_REL_TOL) -> "KmeElement":
        """Merge duplicate anchors and prune negligible weights; if the
        anchor list would still exceed ``cap``, drop the smallest weights."""
        anchors, inv = np.unique(self.anchors, return_inverse=True)
        weights = np.bincount(inv, weights=self.weights, minlength=anchors.size)
        scale = np.abs(weights).max() if weights.size else 0.0
        keep = np.abs(weights) > rel_tol * scale
        anchors, weights = anchors[keep], weights[keep]
        if cap is not None and anchors.size > cap:
            logger.warning("KME anchor cap %d hit (%d anchors); pruning smallest weights", cap, anchors.size)
            order = np.argsort(np.abs(weights))[::-1][:cap]
            order.sort()
            anchors, weights = anchors[order], weights[order]
        return KmeElement(anchors, weights, self.kernel)

    def evaluate(self, y) -> np.ndarray:
        return self.kernel(np.asarray(y, dtype=float)[..., None], self.anchors) @ self.weights


def kme_inner(u: KmeElement, v: KmeElement) -> float:
    """Gram double sum sum_ij u_i v_j kappa(y_i, y'_j)."""
    if u.kernel != v.kernel:
        raise ValueError("kernel mismatch between RKHS elements")
    return float(u.weights @ u.kernel(u.anchors[:, None], v.anchors[None, :]) @ v.weights)


def kme_norm(u: KmeElement) -> float:
    return float(np.sqrt(max(kme_inner(u, u), 0.0)))


def cond_mean_feature(model, x: np.ndarray, kernel: GaussianKernel) -> KmeElement:
    """Weighted feature sum over the fitted anchors at a query x.

    The similarity weights are applied to the raw anchor outcomes (no
    smoothing convolution; the embedding kernel already smooths)."""
    w = model.weights(np.atleast_2d(x))[0]
    return KmeElement(model.anchors_y, w, kernel)


def pivoted_chol(anchors: np.ndarray, kernel: GaussianKernel, tol: float = 1e-10, max_rank: int | None = None) -> np.ndarray:
    """Low-rank pivoted Cholesky factor L with ||G - L L'||_tr <= tol.

    Exploits the rapid spectral decay of smooth kernels so Gram quadratic
    forms over many anchors cost O(n r) instead of O(n^2)."""
    y = np.asarray(anchors, dtype=float)
    n = y.size
    if max_rank is None:
        max_rank = min(n, 512)
    d = kernel(y, y).copy() if np.ndim(kernel(y, y)) else np.full(n, float(kernel(y[0], y[0])))
    d = np.asarray(kernel(y, y), dtype=float) * np.ones(n)
    cols = []
    for _ in range(max_rank):
        if d.sum() <= tol:
            break
        p = int(np.argmax(d))
        col = kernel(y, y[p])
        if cols:
            lmat = np.column_stack(cols)
            col = col - lmat @ lmat[p]
        piv = max(d[p], 1e-300)
        col = col / np.sqrt(piv)
        cols.append(col)
        d = np.maximum(d - col * col, 0.0)
    if not cols:
        return np.zeros((n, 1))
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Bandlimited density


@dataclass(frozen=True)
class BandFn:
    """Element of the sinc RKHS stored by its values on a quadrature grid."""

    b: float
    grid: QuadGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.points.shape:
            raise ValueError("values must match the grid")
        object.__setattr__(self, "values", v)

    def coords(self) -> np.ndarray:
        """Finite-dimensional coordinates D_m(f) = values * scales."""
        return self.values * self.grid.scales


def band_inner(f: BandFn, g: BandFn) -> float:
    if f.grid is not g.grid and not np.array_equal(f.grid.points, g.grid.points):
        raise ValueError("band functions live on different grids")
    return float(f.coords() @ g.coords())


def make_band_grid(y_treated: np.ndarray, m: int = DEFAULT_BAND_GRID_M) -> QuadGrid:
    """Gaussian-importance grid centered at the treated-outcome mean with
    scale four treated-outcome standard deviations."""
    y = np.asarray(y_treated, dtype=float)
    return QuadGrid.gaussian_importance(m, float(y.mean()), 4.0 * float(y.std()))


def _sinc_cross(grid_points: np.ndarray, dens_grid: np.ndarray, b: float) -> np.ndarray:
    # (m, G) matrix of kernel evaluations between output grid and density grid
    return sinc_kernel(grid_points[:, None], dens_grid[None, :], b)


def band_plugin(data: Dataset, fit: FoldFit, b: float, grid: QuadGrid, arm: int = 1) -> BandFn:
    """Plug-in bandlimited density: the sinc-convolved conditional density
    averaged over the training-fold covariates, evaluated on the grid."""
    if b <= 0:
        raise ValueError("bandlimit b must be positive")
    dens = fit.density(arm)
    pbar = dens.density(data.x[fit.train_idx]).mean(axis=0)
    kmat = _sinc_cross(grid.points, dens.grid, b)
    return BandFn(b, grid, kmat @ (pbar * dens.dy))


def _band_mu(fit: FoldFit, xq: np.ndarray, b: float, points: np.ndarray, arm: int = 1) -> np.ndarray:
    """Conditional sinc features mu(x)(t) for query rows, shape (n_q, len(points))."""
    dens = fit.density(arm)
    kmat = _sinc_cross(points, dens.grid, b)
    return dens.density(xq) @ (kmat.T * dens.dy)


def band_eif_rows(
    data: Dataset, fit: FoldFit, b: float, points: np.ndarray, plugin_values: np.ndarray, arm: int = 1
) -> np.ndarray:
    """Influence-function values at ``points`` for the evaluation-fold rows."""
    xe = data.x[fit.eval_idx]
    ae = data.a[fit.eval_idx]
    ye = data.y[fit.eval_idx]
    g1 = fit.propensity.predict(xe)
    g = g1 if arm == 1 else 1.0 - g1
    ind = (ae == arm).astype(float)
    mu = _band_mu(fit, xe, b, points, arm)
    kself = sinc_kernel(ye[:, None], points[None, :], b)
    return (ind / g)[:, None] * (kself - mu) + (mu - plugin_values[None, :])


@dataclass(frozen=True)
class BandOneStepFit:
    """Cross-fitted one-step fit for the bandlimited density."""

    b: float
    grid: QuadGrid
    plugin_values: np.ndarray
    correction_values: np.ndarray
    eif: np.ndarray
    fold_of_row: np.ndarray
    per_fold_plugin: tuple
    per_fold_correction: tuple

    @property
    def estimate(self) -> BandFn:
        return BandFn(self.b, self.grid, self.plugin_values + self.correction_values)

    @property
    def plugin(self) -> BandFn:
        return BandFn(self.b, self.grid, self.plugin_values)

    def eif_coords(self) -> np.ndarray:
        """Per-observation D_m coordinates of the influence values."""
        return self.eif * self.grid.scales[None, :]

    def estimate_coords(self) -> np.ndarray:
        return self.estimate.coords()


def band_onestep(
    data: Dataset,
    b: float = 2.0,
    folds: int = 2,
    seed: int = 0,
    learner: str = "logistic",
    m: int = DEFAULT_BAND_GRID_M,
    grid: QuadGrid | None = None,
    dens_grid: int | np.ndarray = 500,
    split: FoldSplit | None = None,
    arm: int = 1,
    propensity: PropensityModel | None = None,
    bandwidth: float | None = None,
    eps: float = 0.01,
) -> BandOneStepFit:
    """Cross-fitted one-step estimator of the bandlimited counterfactual
    density; averages per-fold plug-ins plus held-out correction means."""
    if split is None:
        split = split_folds(data.n, folds, seed)
    if grid is None:
        grid = make_band_grid(data.y[data.a == arm], m)
    bundles = fit_fold_bundles(
        data, split, learner=learner, grid=dens_grid, arms=(arm,), bandwidth=bandwidth, propensity=propensity, eps=eps
    )
    mpts = grid.points.size
    plugin = np.zeros(mpts)
    correction = np.zeros(mpts)
    eif = np.zeros((data.n, mpts))
    per_plugin, per_corr = [], []
    for fit in bundles:
        p = band_plugin(data, fit, b, grid, arm).values
        rows = band_eif_rows(data, fit, b, grid.points, p, arm)
        eif[fit.eval_idx] = rows
        plugin += p / split.j
        correction += rows.mean(axis=0) / split.j
        per_plugin.append(p)
        per_corr.append(rows.mean(axis=0))
    return BandOneStepFit(
        b=b,
        grid=grid,
        plugin_values=plugin,
        correction_values=correction,
        eif=eif,
        fold_of_row=split.assignment.copy(),
        per_fold_plugin=tuple(per_plugin),
        per_fold_correction=tuple(per_corr),
    )


def band_pointwise_values(data: Dataset, fit: BandOneStepFit, bundles: list, t: float, arm: int = 1):
    """One-step estimate and per-observation influence values at a point t.

    Used for efficient pointwise Wald intervals alongside the uniform band.
    """
    pts = np.array([t])
    est = 0.0
    eif = np.zeros(data.n)
    for fb in bundles:
        dens = fb.density(arm)
        kvec = _sinc_cross(pts, dens.grid, fit.b)[0]
        pbar = dens.density(data.x[fb.train_idx]).mean(axis=0)
        plug_t = float(kvec @ (pbar * dens.dy))
        rows = band_eif_rows(data, fb, fit.b, pts, np.array([plug_t]), arm)[:, 0]
        eif[fb.eval_idx] = rows
        est += (plug_t + rows.mean()) / len(bundles)
    return est, eif


# ---------------------------------------------------------------------------
# Counterfactual kernel mean embedding


def kme_plugin(data: Dataset, fit: FoldFit, kernel: GaussianKernel, arm: int = 1) -> KmeElement:
    """Plug-in embedding: conditional feature means averaged over the
    training-fold covariates."""
    dens = fit.density(arm)
    w = dens.weights(data.x[fit.train_idx]).mean(axis=0)
    return KmeElement(dens.anchors_y, w, kernel)


def kme_eif(z: tuple, fit: FoldFit, kernel: GaussianKernel, plugin: KmeElement, arm: int = 1) -> KmeElement:
    """Influence-function element at a single observation z = (x, a, y)."""
    x, a, y = z
    x = np.atleast_2d(np.asarray(x, dtype=float))
    dens = fit.density(arm)
    g1 = float(fit.propensity.predict(x)[0])
    g = g1 if arm == 1 else 1.0 - g1
    ind = 1.0 if int(a) == arm else 0.0
    w_mu = dens.weights(x)[0]
    anchors = np.concatenate([[float(y)], dens.anchors_y, plugin.anchors])
    weights = np.concatenate([[ind / g], (1.0 - ind / g) * w_mu, -plugin.weights])
    return KmeElement(anchors, weights, kernel).simplify()


def _kme_weight_frame(data: Dataset, fit: FoldFit, kernel: GaussianKernel, arm: int):
    """Per-fold plug-in weights and per-row influence weights, both over the
    common anchor frame given by the full outcome vector."""
    n = data.n
    dens = fit.density(arm)
    tr_mask = np.zeros(n, dtype=bool)
    tr_mask[fit.train_idx] = True
    anchor_idx = np.flatnonzero(tr_mask & (data.a == arm))
    # anchors_y of the fitted model are data.y[anchor_idx] in training order
    w_plugin = np.zeros(n)
    w_plugin[anchor_idx] = dens.weights(data.x[fit.train_idx]).mean(axis=0)

    xe = data.x[fit.eval_idx]
    ae = data.a[fit.eval_idx]
    g1 = fit.propensity.predict(xe)
    g = g1 if arm == 1 else 1.0 - g1
    ind = (ae == arm).astype(float)
    ratio = ind / g
    w_mu = dens.weights(xe)
    rows = np.zeros((fit.eval_idx.size, n))
    rows[:, anchor_idx] = (1.0 - ratio)[:, None] * w_mu
    rows[np.arange(fit.eval_idx.size), fit.eval_idx] += ratio
    raw_mean = rows.mean(axis=0)
    rows -= w_plugin[None, :]
    return w_plugin, rows, raw_mean


@dataclass(frozen=True)
class KmeFit:
    """Cross-fitted KME one-step fit over the common outcome-anchor frame.

    The one-step weights are assembled directly from the raw per-fold row
    means (the plug-in cancels algebraically), and the correction is their
    difference from the plug-in, so the decomposition
    est = plugin + correction holds bitwise.
    """

    kernel: GaussianKernel
    anchors: np.ndarray
    plugin_weights: np.ndarray
    correction_weights: np.ndarray
    est_weights: np.ndarray
    eif_weights: np.ndarray
    fold_of_row: np.ndarray

    def element(self) -> KmeElement:
        cap = ANCHOR_CAP_FACTOR * self.anchors.size
        return KmeElement(self.anchors, self.est_weights, self.kernel).simplify(cap=cap)

    def plugin_element(self) -> KmeElement:
        return KmeElement(self.anchors, self.plugin_weights, self.kernel).simplify()


def kme_onestep(
    data: Dataset,
    kernel: GaussianKernel,
    folds: int = 2,
    seed: int = 0,
    learner: str = "logistic",
    split: FoldSplit | None = None,
    arm: int | str = 1,
    propensity: PropensityModel | None = None,
    grid: int | np.ndarray = 500,
    eps: float = 0.01,
) -> KmeFit:
    """Cross-fitted one-step estimator of the counterfactual kernel mean
    embedding (``arm='difference'`` gives the treated-minus-control
    embedding used by the MMD test)."""
    if split is None:
        split = split_folds(data.n, folds, seed)
    arms = (0, 1) if arm == "difference" else (arm,)
    if arm == "difference" and (data.a.min() == data.a.max()):
        raise ValueError("embedding difference needs both treatment arms")
    bundles = fit_fold_bundles(
        data, split, learner=learner, grid=grid, arms=arms, propensity=propensity, eps=eps
    )
    n = data.n
    plugin = np.zeros(n)
    correction = np.zeros(n)
    est = np.zeros(n)
    eif = np.zeros((n, n))
    for fit in bundles:
        if arm == "difference":
            p1, r1, m1 = _kme_weight_frame(data, fit, kernel, 1)
            p0, r0, m0 = _kme_weight_frame(data, fit, kernel, 0)
            p, rows, raw = p1 - p0, r1 - r0, m1 - m0
        else:
            p, rows, raw = _kme_weight_frame(data, fit, kernel, arm)
        eif[fit.eval_idx] = rows
        plugin += p / split.j
        correction += rows.mean(axis=0) / split.j
        est += raw / split.j
    return KmeFit(
        kernel=kernel,
        anchors=data.y.copy(),
        plugin_weights=plugin,
        correction_weights=correction,
        est_weights=est,
        eif_weights=eif,
        fold_of_row=split.assignment.copy(),
    )
