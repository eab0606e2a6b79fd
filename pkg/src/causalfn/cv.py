"""Four-fold, all-permutations cross-validated selection of the
regularization sequence (and optionally the basis) using the
influence-corrected quadratic loss.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .hilbert import Basis, L2Fn, RegSeq
from .nuisance import Dataset, FoldFit, fit_propensity, fit_cond_density

__all__ = ["CvConfig", "cv_loss", "cv_select"]


def default_candidates(k_top: int = 16) -> tuple:
    return tuple(RegSeq.hard(k) for k in range(k_top + 1))


@dataclass(frozen=True)
class CvConfig:
    candidates: tuple = field(default_factory=default_candidates)
    bases: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidate set must be nonempty")


def _loss_pieces(probe: Dataset, loss_fit: FoldFit, data: Dataset, basis: Basis):
    """Plug-in coefficients of the loss nuisance and influence-operator
    rows for the probe observations."""
    dens = loss_fit.density(1)
    plugin = dens.mean_basis(data.x[loss_fit.train_idx], basis).mean(axis=0)
    g = loss_fit.propensity.predict(probe.x)
    ind = (probe.a == 1).astype(float)
    m_s = dens.mean_basis(probe.x, basis)
    h_s = basis.eval_matrix(probe.y)
    rows = (ind / g)[:, None] * (h_s - m_s) + (m_s - plugin[None, :])
    return plugin, rows


def cv_loss(z: tuple, h: L2Fn, loss_fit: FoldFit, data: Dataset, basis: Basis) -> float:
    """Influence-corrected loss at one observation:
    L(z; h) = 0.5 ||h - nu_loss||^2 - corr[h - nu_loss](z), truncated at the
    basis order."""
    if not h.basis.same_as(basis):
        raise ValueError("basis mismatch between candidate and loss nuisance")
    x, a, y = z
    probe = Dataset(np.atleast_2d(np.asarray(x, dtype=float)), np.array([int(a)]), np.array([float(y)]))
    plugin, rows = _loss_pieces(probe, loss_fit, data, basis)
    d = h.coeffs - plugin
    return float(0.5 * d @ d - rows[0] @ d)


def _candidate_size(beta: RegSeq, k_max: int) -> float:
    return float(beta.materialize(k_max).sum())


def cv_select(
    data: Dataset,
    config: CvConfig,
    basis: Basis,
    learner: str = "logistic",
    grid: int = 500,
    return_risks: bool = False,
):
    """All-permutations four-fold selection of the regularization sequence.

    Partitions rows into four folds, fits one nuisance per fold (on that
    fold only), and for every ordered fold permutation (j1, j2, j3, j4)
    scores the candidate built from (nuisance j1, correction mean over j3)
    with the influence-corrected loss under nuisance j2 averaged over j4.
    Candidate risks are averaged over all 24 permutations; ties break
    toward the smaller (more regularized) candidate.  When ``config.bases``
    is nonempty the basis is selected jointly with the candidate.
    """
    if data.n < 8:
        raise ValueError("need n >= 8 for four-fold selection")
    bases = config.bases if config.bases else (basis,)
    rng = np.random.default_rng(config.seed)
    assignment = np.resize(np.arange(4), data.n)
    rng.shuffle(assignment)
    fold_idx = [np.flatnonzero(assignment == j) for j in range(4)]

    fits = []
    for j in range(4):
        sub = data.subset(fold_idx[j])
        prop = fit_propensity(sub, learner)
        dens = fit_cond_density(sub, grid, arm=1)
        other = np.flatnonzero(assignment != j)
        fits.append(FoldFit(j, fold_idx[j], other, prop, {1: dens}))

    best = None
    risks_out = {}
    for bas in bases:
        k_max = bas.k_max
        plugin = {}
        corr_mean = {}
        loss_plugin = {}
        loss_rows_mean = {}
        loss_rows = {}
        for j1 in range(4):
            dens = fits[j1].density(1)
            m_tr = dens.mean_basis(data.x[fold_idx[j1]], bas)
            plugin[j1] = m_tr.mean(axis=0)
            for j3 in range(4):
                if j3 == j1:
                    continue
                xs = data.x[fold_idx[j3]]
                g = fits[j1].propensity.predict(xs)
                ind = (data.a[fold_idx[j3]] == 1).astype(float)
                m_s = dens.mean_basis(xs, bas)
                h_s = bas.eval_matrix(data.y[fold_idx[j3]])
                rows = (ind / g)[:, None] * (h_s - m_s) + (m_s - plugin[j1][None, :])
                corr_mean[(j1, j3)] = rows.mean(axis=0)
        for j2 in range(4):
            dens = fits[j2].density(1)
            m_tr = dens.mean_basis(data.x[fold_idx[j2]], bas)
            loss_plugin[j2] = m_tr.mean(axis=0)
            for j4 in range(4):
                if j4 == j2:
                    continue
                xs = data.x[fold_idx[j4]]
                g = fits[j2].propensity.predict(xs)
                ind = (data.a[fold_idx[j4]] == 1).astype(float)
                m_s = dens.mean_basis(xs, bas)
                h_s = bas.eval_matrix(data.y[fold_idx[j4]])
                rows = (ind / g)[:, None] * (h_s - m_s) + (m_s - loss_plugin[j2][None, :])
                loss_rows[(j2, j4)] = rows
                loss_rows_mean[(j2, j4)] = rows.mean(axis=0)

        betas = {id(c): c.materialize(k_max) for c in config.candidates}
        risks = {id(c): [] for c in config.candidates}
        for perm in itertools.permutations(range(4)):
            j1, j2, j3, j4 = perm
            nu_loss = loss_plugin[j2]
            mean_row = loss_rows_mean[(j2, j4)]
            base_est = plugin[j1]
            corr = corr_mean[(j1, j3)]
            for cand in config.candidates:
                b = betas[id(cand)]
                h = base_est + b * corr
                d = h - nu_loss
                risks[id(cand)].append(0.5 * float(d @ d) - float(mean_row @ d))
        agg = {id(c): float(np.mean(risks[id(c)])) for c in config.candidates}
        order = sorted(config.candidates, key=lambda c: _candidate_size(c, k_max))
        winner = min(order, key=lambda c: agg[id(c)])
        risks_out[bas.kind] = {
            c.label(): {"mean": agg[id(c)], "permutations": list(risks[id(c)])}
            for c in config.candidates
        }
        if best is None or agg[id(winner)] < best[2]:
            best = (winner, bas, agg[id(winner)])

    selected = replace(best[0], data_selected=True)
    if return_risks:
        return selected, best[1], risks_out
    return selected, best[1]
