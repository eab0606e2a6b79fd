import numpy as np
import pytest

from causalfn.density import (
    density_difference,
    eif_coefficient,
    eif_matrix,
    plugin_coefficients,
    projection_onestep,
    regularized_eif_coeffs,
    regularized_onestep,
)
from causalfn.hilbert import Basis, L2Fn, RegSeq, project_callable, sobolev_norm_u
from causalfn.nuisance import (
    Dataset,
    FoldFit,
    FunctionPropensity,
    fit_fold_bundles,
    split_folds,
)
from causalfn.simlab import DgpConfig, gen_data

BASIS = Basis("cosine", 16)


@pytest.fixture(scope="module")
def small_fit():
    data = gen_data(DgpConfig("nonzero_both", "same", n=600, seed=2))
    fit = regularized_onestep(data, BASIS, RegSeq.hard(8), seed=4)
    return data, fit


class OracleDensity:
    """Conditional density equal to a known analytic density per x-regime."""

    def __init__(self, grid, low_params=(2.0, 2.0), high_params=(4.0, 4.0)):
        self.grid = grid
        self.dy = float(grid[1] - grid[0])
        self.low = self._beta_pdf(low_params)
        self.high = self._beta_pdf(high_params)

    def _beta_pdf(self, params):
        from scipy.stats import beta as sbeta

        raw = sbeta.pdf(self.grid, *params)
        return raw / (raw.sum() * self.dy)

    def density(self, xq):
        xq = np.atleast_2d(xq)
        rows = np.where((xq[:, 0] <= 0.0)[:, None], self.low[None, :], self.high[None, :])
        return rows

    def mean_basis(self, xq, basis):
        bmat = basis.eval_matrix(self.grid) * self.dy
        return self.density(xq) @ bmat


class TestPluginAndEif:
    def test_unit_mass_coefficient(self, small_fit):
        _, fit = small_fit
        assert fit.plugin_coeffs[0] == pytest.approx(1.0, abs=1e-6)
        # the correction to the unit-mass coefficient vanishes identically
        assert np.abs(fit.eif[:, 0]).max() < 1e-10

    def test_covariate_free_weights_give_pooled_projection(self):
        # identical covariates force uniform similarity weights, so the
        # plug-in equals the projection of the pooled treated KDE
        rng = np.random.default_rng(5)
        n = 200
        data = Dataset(np.zeros((n, 1)), (rng.uniform(size=n) < 0.6).astype(int), rng.beta(2, 2, size=n))
        split = split_folds(n, 2, seed=0)
        bundles = fit_fold_bundles(data, split, grid=np.linspace(0, 1, 500), arms=(1,))
        fb = bundles[0]
        plug = plugin_coefficients(fb, data, BASIS)
        dens = fb.density(1)
        pooled = dens.density(np.zeros((1, 1)))[0]
        direct = BASIS.eval_matrix(dens.grid).T @ pooled * dens.dy
        assert np.abs(plug.coeffs - direct).max() < 1e-12

    def test_control_observation_drops_weighting_term(self, small_fit):
        data, _ = small_fit
        bundles = fit_fold_bundles(
            data, split_folds(data.n, 2, seed=4), grid=500, arms=(1,)
        )
        fb = bundles[0]
        i = fb.eval_idx[np.flatnonzero(data.a[fb.eval_idx] == 0)[0]]
        z = (data.x[i], data.a[i], data.y[i])
        val = eif_coefficient(z, 3, fb, data, BASIS)
        dens = fb.density(1)
        m3 = dens.mean_basis(data.x[i][None, :], BASIS)[0, 2]
        m3_avg = dens.mean_basis(data.x[fb.train_idx], BASIS)[:, 2].mean()
        assert val == pytest.approx(m3 - m3_avg, abs=1e-12)

    def test_eif_linearity_in_function_argument(self, small_fit):
        data, fit = small_fit
        rng = np.random.default_rng(0)
        coeffs = rng.standard_normal(BASIS.k_max)
        combo_rows = fit.eif @ coeffs
        # direct evaluation of the influence operator at h = sum c_k h_k
        bundles = fit_fold_bundles(data, split_folds(data.n, 2, seed=4), grid=500, arms=(1,))
        h = L2Fn(BASIS, coeffs)
        for fb in bundles:
            xe, ae, ye = data.x[fb.eval_idx], data.a[fb.eval_idx], data.y[fb.eval_idx]
            dens = fb.density(1)
            g = fb.propensity.predict(xe)
            ind = (ae == 1).astype(float)
            m_h = dens.mean_basis(xe, BASIS) @ coeffs
            m_avg = dens.mean_basis(data.x[fb.train_idx], BASIS) @ coeffs
            direct = ind / g * (h(ye) - m_h) + (m_h - m_avg.mean())
            assert np.abs(direct - combo_rows[fb.eval_idx]).max() < 1e-12

    def test_regularized_eif_damping(self, small_fit):
        data, fit = small_fit
        bundles = fit_fold_bundles(data, split_folds(data.n, 2, seed=4), grid=500, arms=(1,))
        fb = bundles[0]
        i = fb.eval_idx[0]
        z = (data.x[i], data.a[i], data.y[i])
        zero = regularized_eif_coeffs(z, RegSeq.hard(0), fb, data, BASIS)
        assert np.array_equal(zero, np.zeros(BASIS.k_max))
        hard4 = regularized_eif_coeffs(z, RegSeq.hard(4), fb, data, BASIS)
        assert np.array_equal(hard4[4:], np.zeros(BASIS.k_max - 4))
        small = regularized_eif_coeffs(z, RegSeq.rational(2.0, 2.0), fb, data, BASIS)
        big = regularized_eif_coeffs(z, RegSeq.rational(8.0, 2.0), fb, data, BASIS)
        assert np.linalg.norm(small) <= np.linalg.norm(big) + 1e-14


class TestOneStep:
    def test_zero_beta_recovers_plugin_exactly(self, small_fit):
        data, _ = small_fit
        fit = regularized_onestep(data, BASIS, RegSeq.hard(0), seed=4)
        assert np.array_equal(fit.estimate.coeffs, fit.plugin_coeffs)

    def test_bookkeeping_self_consistency(self, small_fit):
        _, fit = small_fit
        total = np.zeros(BASIS.k_max)
        for j in range(2):
            rows = fit.eif[fit.fold_of_row == j]
            assert np.abs(rows.mean(axis=0) - fit.per_fold_correction[j]).max() < 1e-14
            total += rows.mean(axis=0) / 2.0
        assert np.abs(total - fit.correction_coeffs).max() < 1e-14

    def test_duplication_invariance_with_fixed_split(self):
        data = gen_data(DgpConfig("nonzero_both", "same", n=300, seed=9))
        split = split_folds(300, 2, seed=1)
        kwargs = dict(learner="logistic", bandwidth=0.05, x_bandwidth=0.5)
        fit = regularized_onestep(data, BASIS, RegSeq.hard(6), split=split, **kwargs)
        doubled = Dataset(
            np.vstack([data.x, data.x]), np.concatenate([data.a, data.a]), np.concatenate([data.y, data.y])
        )
        from causalfn.nuisance import FoldSplit

        dsplit = FoldSplit(600, 2, np.concatenate([split.assignment, split.assignment]), 1)
        dfit = regularized_onestep(doubled, BASIS, RegSeq.hard(6), split=dsplit, **kwargs)
        # empirical-mean invariance; equality holds to summation-order ulps
        assert np.abs(fit.estimate.coeffs - dfit.estimate.coeffs).max() < 1e-14

    def test_determinism(self):
        data = gen_data(DgpConfig("zero_both", "same", n=300, seed=3))
        f1 = regularized_onestep(data, BASIS, RegSeq.rational(5, 2), seed=7)
        f2 = regularized_onestep(data, BASIS, RegSeq.rational(5, 2), seed=7)
        assert np.array_equal(f1.estimate.coeffs, f2.estimate.coeffs)
        assert np.array_equal(f1.eif, f2.eif)

    def test_sigma_beta_matches_direct_formula(self, small_fit):
        _, fit = small_fit
        reg = fit.eif * fit.beta.materialize(BASIS.k_max)[None, :]
        direct = np.sqrt(np.mean(np.sum(reg**2, axis=1)))
        assert fit.sigma_beta() == pytest.approx(direct, rel=1e-12)


class TestProjectionForm:
    def test_difference_identity(self, small_fit):
        data, _ = small_fit
        beta = RegSeq.rational(5.0, 2.0)
        bar = regularized_onestep(data, BASIS, beta, seed=4)
        tilde = projection_onestep(data, BASIS, beta, seed=4)
        b = beta.materialize(BASIS.k_max)
        lhs = tilde.estimate.coeffs - bar.estimate.coeffs
        rhs = np.zeros(BASIS.k_max)
        for j in range(2):
            rhs += (b * bar.per_fold_plugin[j] - bar.per_fold_plugin[j]) / 2.0
        assert np.abs(lhs - rhs).max() < 1e-12

    def test_full_threshold_collapses_to_onestep(self, small_fit):
        data, _ = small_fit
        beta = RegSeq.hard(BASIS.k_max)
        bar = regularized_onestep(data, BASIS, beta, seed=4)
        tilde = projection_onestep(data, BASIS, beta, seed=4)
        assert np.array_equal(bar.estimate.coeffs, tilde.estimate.coeffs)

    def test_hard4_matches_direct_per_coefficient_formula(self, small_fit):
        data, _ = small_fit
        tilde = projection_onestep(data, BASIS, RegSeq.hard(4), seed=4)
        # oracle: recompute 0.5 sum_j [<plugin_j, h_k> + fold-j mean eif_k]
        direct = np.zeros(BASIS.k_max)
        for j in range(2):
            rows = tilde.eif[tilde.fold_of_row == j]
            direct += (tilde.per_fold_plugin[j] + rows.mean(axis=0)) / 2.0
        expected = np.where(np.arange(1, BASIS.k_max + 1) <= 4, direct, 0.0)
        assert np.abs(tilde.estimate.coeffs - expected).max() < 1e-12


class TestDensityDifference:
    def test_label_swap_antisymmetry(self):
        data = gen_data(DgpConfig("nonzero_both", "same", n=400, seed=6))
        split = split_folds(400, 2, seed=2)
        fit = density_difference(data, BASIS, RegSeq.hard(8), split=split)
        swapped = Dataset(data.x, 1 - data.a, data.y)
        fit_sw = density_difference(swapped, BASIS, RegSeq.hard(8), split=split)
        assert np.abs(fit.estimate.coeffs + fit_sw.estimate.coeffs).max() < 1e-12
        assert np.abs(fit.eif + fit_sw.eif).max() < 1e-12

    def test_eif_is_armwise_difference(self):
        data = gen_data(DgpConfig("nonzero_both", "same", n=400, seed=8))
        split = split_folds(400, 2, seed=3)
        diff = density_difference(data, BASIS, RegSeq.hard(8), split=split)
        one = regularized_onestep(data, BASIS, RegSeq.hard(8), split=split, arm=1)
        zero = regularized_onestep(data, BASIS, RegSeq.hard(8), split=split, arm=0)
        assert np.abs(diff.eif - (one.eif - zero.eif)).max() < 1e-12
        assert np.abs(diff.plugin_coeffs - (one.plugin_coeffs - zero.plugin_coeffs)).max() < 1e-12

    def test_single_arm_rejected(self):
        data = Dataset(np.zeros((20, 1)), np.ones(20, dtype=int), np.linspace(0.01, 0.99, 20))
        with pytest.raises(ValueError):
            density_difference(data, BASIS, RegSeq.hard(4))


class TestDiagnostics:
    def test_remainder_vanishes_with_oracle_nuisances(self):
        # inject the true propensity and the true conditional density; the
        # first-order remainder <nu(Phat) - nu(P0), h_k> + P0 corr(h_k) is
        # then zero, so its Monte Carlo estimate stays within 3 SE of zero.
        rng = np.random.default_rng(42)
        n_train, n_mc = 400, 120_000
        ntot = n_train + n_mc
        x = rng.standard_normal((ntot, 1))
        g0 = 0.2 + 0.6 / (1.0 + np.exp(-x[:, 0]))
        a = (rng.uniform(size=ntot) < g0).astype(int)
        grid = np.linspace(0.0, 1.0, 500)
        oracle = OracleDensity(grid)
        low_mask = x[:, 0] <= 0.0
        y = np.where(low_mask, rng.beta(2, 2, size=ntot), rng.beta(4, 4, size=ntot))
        data = Dataset(x, a, y)
        fit = FoldFit(
            0,
            np.arange(n_train),
            np.arange(n_train, ntot),
            FunctionPropensity(lambda xq: 0.2 + 0.6 / (1.0 + np.exp(-xq[:, 0]))),
            {1: oracle},
        )
        rows = eif_matrix(data, fit, BASIS)
        plug = plugin_coefficients(fit, data, BASIS).coeffs
        truth = 0.5 * (
            project_callable(lambda t: np.interp(t, grid, oracle.low), BASIS).coeffs
            + project_callable(lambda t: np.interp(t, grid, oracle.high), BASIS).coeffs
        )
        # MC draws are not exactly split half/half across regimes; correct
        # the truth by the regime frequencies of the MC sample
        frac_low = low_mask[n_train:].mean()
        truth = frac_low * project_callable(lambda t: np.interp(t, grid, oracle.low), BASIS).coeffs + (
            1 - frac_low
        ) * project_callable(lambda t: np.interp(t, grid, oracle.high), BASIS).coeffs
        for k in range(8):
            remainder = (plug[k] - truth[k]) + rows[:, k].mean()
            se = rows[:, k].std() / np.sqrt(n_mc)
            assert abs(remainder) < 3.0 * se + 5e-4, k

    def test_bias_bound_diagnostic(self, small_fit):
        data, fit = small_fit
        truth = project_callable(lambda y: np.ones_like(y), BASIS)
        diff = L2Fn(BASIS, fit.plugin_coeffs - truth.coeffs)
        for big_k in (2, 4, 8):
            tail = np.sqrt(np.sum(diff.coeffs[big_k:] ** 2))
            for u in (0.5, 1.0, 2.0):
                bound = (big_k + 1) ** (-u) * sobolev_norm_u(diff, u)
                assert tail <= bound + 1e-10


class TestMonteCarloExamples:
    def test_plugin_recovers_mixture_at_desk_scale(self):
        # L2 distance of the plug-in to the zero-on-both-sides mixture
        from causalfn.simlab import TruthFn, mise

        data = gen_data(DgpConfig("zero_both", "same", n=4000, seed=77))
        fit = regularized_onestep(data, Basis("cosine", 64), RegSeq.hard(8), seed=5)
        grid = np.linspace(0, 1, 500)
        truth = TruthFn("zero_both").q1(grid)
        dist = np.sqrt(mise(fit.plugin(grid), truth, grid))
        assert dist < 0.2

    @pytest.mark.slow
    def test_onestep_relative_performance_improves_with_n(self):
        # the selected one-step closes its MISE gap to the plug-in as n
        # grows and is near parity at n=4000 (the qualitative crossover
        # trend; with these kernel nuisances and a covariate-independent
        # truth the plug-in is near-oracle, see the decisions ledger)
        from causalfn.cv import CvConfig, cv_select
        from causalfn.simlab import TruthFn, mise

        grid = np.linspace(0, 1, 500)
        truth = TruthFn("nonzero_both").q1(grid)
        basis = Basis("cosine", 64)
        ratios = {}
        for n in (500, 4000):
            one, plug = [], []
            for rep in range(20):
                data = gen_data(DgpConfig("nonzero_both", "same", n=n, seed=8800 + rep))
                bsel, _ = cv_select(data, CvConfig(seed=rep), Basis("cosine", 17))
                fit = regularized_onestep(data, basis, RegSeq.hard(bsel.k_threshold), seed=rep)
                one.append(mise(fit.estimate(grid), truth, grid))
                plug.append(mise(fit.plugin(grid), truth, grid))
            ratios[n] = np.mean(one) / np.mean(plug)
        assert ratios[4000] <= ratios[500] + 0.02
        assert ratios[4000] < 1.15

    @pytest.mark.slow
    def test_difference_norm_small_under_null(self):
        # equal arm laws: the estimated difference norm collapses
        from causalfn.hilbert import norm as l2norm

        hits = 0
        reps = 100
        for rep in range(reps):
            data = gen_data(DgpConfig("nonzero_both", "same", n=4000, seed=9900 + rep))
            fit = density_difference(data, Basis("cosine", 64), RegSeq.rational(5, 2), seed=rep, eps=0.05)
            hits += l2norm(fit.estimate) < 0.3
        assert hits >= 0.9 * reps
