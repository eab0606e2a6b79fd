import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalfn.hilbert import (
    Basis,
    L2Fn,
    QuadGrid,
    RegSeq,
    dm_map,
    eval_basis,
    gamma_beta,
    gamma_beta_inv,
    gauss_legendre,
    inner,
    norm,
    project_callable,
    seminorm_beta,
    sinc_kernel,
    sobolev_norm_u,
)

SQRT2 = np.sqrt(2.0)


def unit_vector(basis, k):
    c = np.zeros(basis.k_max)
    c[k - 1] = 1.0
    return L2Fn(basis, c)


class TestBasis:
    def test_cosine_first_element_is_unit_constant(self):
        b = Basis("cosine", 8)
        assert eval_basis(b, 1, 0.37) == 1.0

    def test_cosine_second_element_at_zero(self):
        b = Basis("cosine", 8)
        assert eval_basis(b, 2, 0.0) == pytest.approx(SQRT2, abs=1e-12)

    def test_legendre_degree_one_odd_about_midpoint(self):
        b = Basis("legendre", 8)
        assert eval_basis(b, 2, 0.5) == pytest.approx(0.0, abs=1e-14)

    def test_out_of_range_index_and_point(self):
        b = Basis("cosine", 4)
        with pytest.raises(ValueError):
            eval_basis(b, 0, 0.5)
        with pytest.raises(ValueError):
            eval_basis(b, 5, 0.5)
        with pytest.raises(ValueError):
            eval_basis(b, 1, 1.5)

    @pytest.mark.parametrize("kind", ["cosine", "legendre"])
    def test_orthonormality_2048_quadrature(self, kind):
        b = Basis(kind, 16)
        t, w = gauss_legendre(2048, 0.0, 1.0)
        mat = b.eval_matrix(t)
        gram = (mat * w[:, None]).T @ mat
        assert np.abs(gram - np.eye(16)).max() < 1e-8

    def test_rescaled_domain_orthonormal(self):
        b = Basis("cosine", 6, lo=-2.0, hi=3.0)
        t, w = gauss_legendre(2048, -2.0, 3.0)
        mat = b.eval_matrix(t)
        gram = (mat * w[:, None]).T @ mat
        assert np.abs(gram - np.eye(6)).max() < 1e-8

    def test_invalid_construction(self):
        with pytest.raises(ValueError):
            Basis("fourier", 4)
        with pytest.raises(ValueError):
            Basis("cosine", 0)
        with pytest.raises(ValueError):
            Basis("cosine", 4, lo=1.0, hi=0.0)


class TestCoefficientArithmetic:
    def test_inner_orthonormal_unit_vectors(self):
        b = Basis("cosine", 8)
        e3 = unit_vector(b, 3)
        assert inner(e3, e3) == 1.0
        assert inner(unit_vector(b, 1), unit_vector(b, 2)) == 0.0

    def test_norm_pythagorean(self):
        b = Basis("cosine", 8)
        c = np.zeros(8)
        c[0], c[1] = 3.0, 4.0
        assert norm(L2Fn(b, c)) == 5.0

    def test_basis_mismatch_error(self):
        f = unit_vector(Basis("cosine", 8), 1)
        g = unit_vector(Basis("legendre", 8), 1)
        with pytest.raises(ValueError):
            inner(f, g)

    def test_nonfinite_coefficients_rejected(self):
        b = Basis("cosine", 4)
        with pytest.raises(ValueError):
            L2Fn(b, np.array([1.0, np.nan, 0.0, 0.0]))


class TestRegSeq:
    def test_hard_threshold_materializes_indicator(self):
        beta = RegSeq.hard(3).materialize(6)
        assert np.array_equal(beta, [1, 1, 1, 0, 0, 0])

    def test_rational_needs_square_summable_exponent(self):
        with pytest.raises(ValueError):
            RegSeq.rational(5.0, 0.5)
        with pytest.raises(ValueError):
            RegSeq.rational(-1.0, 2.0)

    @given(
        c=st.floats(0.5, 20.0),
        p=st.floats(0.51, 4.0),
        k_max=st.integers(1, 64),
    )
    @settings(max_examples=50, deadline=None)
    def test_rational_entries_in_unit_interval_nonincreasing(self, c, p, k_max):
        beta = RegSeq.rational(c, p).materialize(k_max)
        assert np.all(beta >= 0.0) and np.all(beta <= 1.0)
        assert np.all(np.diff(beta) <= 0.0)

    def test_gamma_identity_and_zero(self):
        b = Basis("cosine", 8)
        f = L2Fn(b, np.arange(1.0, 9.0))
        assert np.array_equal(gamma_beta(f, RegSeq.hard(8)).coeffs, f.coeffs)
        assert np.array_equal(gamma_beta(f, RegSeq.hard(0)).coeffs, np.zeros(8))

    def test_gamma_inverse_is_left_inverse(self):
        b = Basis("cosine", 8)
        f = L2Fn(b, np.arange(1.0, 9.0))
        beta = RegSeq.rational(5.0, 2.0)
        back = gamma_beta_inv(gamma_beta(f, beta), beta)
        assert np.abs(back.coeffs - f.coeffs).max() < 1e-12

    def test_gamma_inverse_rejects_zero_entries(self):
        b = Basis("cosine", 8)
        f = unit_vector(b, 1)
        with pytest.raises(ValueError):
            gamma_beta_inv(f, RegSeq.hard(4))

    @given(
        coeffs=st.lists(st.floats(-5, 5), min_size=8, max_size=8),
        coeffs2=st.lists(st.floats(-5, 5), min_size=8, max_size=8),
        a=st.floats(-3, 3),
    )
    @settings(max_examples=50, deadline=None)
    def test_gamma_linear_and_contractive(self, coeffs, coeffs2, a):
        b = Basis("cosine", 8)
        beta = RegSeq.rational(3.0, 1.0)
        f, g = L2Fn(b, np.array(coeffs)), L2Fn(b, np.array(coeffs2))
        combo = L2Fn(b, a * f.coeffs + g.coeffs)
        lhs = gamma_beta(combo, beta).coeffs
        rhs = a * gamma_beta(f, beta).coeffs + gamma_beta(g, beta).coeffs
        assert np.abs(lhs - rhs).max() <= 1e-12 * (1.0 + np.abs(rhs).max())
        assert norm(gamma_beta(f, beta)) <= norm(f) + 1e-12


class TestSeminorms:
    def test_all_ones_prefix_equals_norm(self):
        b = Basis("cosine", 8)
        f = L2Fn(b, np.arange(1.0, 9.0))
        assert seminorm_beta(f, RegSeq.hard(8)) == pytest.approx(norm(f), abs=1e-14)

    def test_unit_vector_rational_value(self):
        b = Basis("cosine", 8)
        # beta_5 = 1/(1 + (5/5)^2) = 0.5
        assert seminorm_beta(unit_vector(b, 5), RegSeq.rational(5.0, 2.0)) == pytest.approx(0.5)

    def test_zero_function(self):
        b = Basis("cosine", 8)
        assert seminorm_beta(L2Fn(b, np.zeros(8)), RegSeq.rational(5.0, 2.0)) == 0.0

    def test_positive_beta_seminorm_controls_norm(self):
        b = Basis("cosine", 8)
        beta = RegSeq.rational(2.0, 1.0)
        mat = beta.materialize(8)
        f = L2Fn(b, np.arange(1.0, 9.0))
        assert norm(f) <= seminorm_beta(f, beta) / mat.min() + 1e-12

    def test_sobolev_examples(self):
        b = Basis("cosine", 8)
        f = L2Fn(b, np.arange(1.0, 9.0))
        assert sobolev_norm_u(f, 0.0) == pytest.approx(norm(f), abs=1e-14)
        assert sobolev_norm_u(unit_vector(b, 3), 1.0) == pytest.approx(3.0)
        c = np.zeros(8)
        c[0], c[1] = 1.0, 1.0
        assert sobolev_norm_u(L2Fn(b, c), 2.0) == pytest.approx(np.sqrt(17.0))


class TestProjection:
    def test_constant_function(self):
        b = Basis("cosine", 8)
        f = project_callable(lambda y: np.ones_like(y), b)
        expected = np.zeros(8)
        expected[0] = 1.0
        assert np.abs(f.coeffs - expected).max() < 1e-8

    def test_pure_second_element(self):
        b = Basis("cosine", 8)
        f = project_callable(lambda y: SQRT2 * np.cos(np.pi * y), b)
        expected = np.zeros(8)
        expected[1] = 1.0
        assert np.abs(f.coeffs - expected).max() < 1e-8

    def test_beta22_against_riemann_oracle(self):
        # independent oracle: midpoint Riemann sum on a 10^6-point grid
        b = Basis("cosine", 8)
        dens = lambda y: 6.0 * y * (1.0 - y)
        f = project_callable(dens, b)
        assert f.coeffs[0] == pytest.approx(1.0, abs=1e-8)
        m = 1_000_000
        t = (np.arange(m) + 0.5) / m
        vals = dens(t)
        oracle = b.eval_matrix(t).T @ vals / m
        assert np.abs(f.coeffs - oracle).max() < 1e-6

    def test_bessel_inequality_and_span_equality(self):
        b = Basis("cosine", 8)
        f = lambda y: 6.0 * y * (1.0 - y)
        proj = project_callable(f, b)
        t, w = gauss_legendre(2048, 0.0, 1.0)
        total = float(w @ f(t) ** 2)
        assert norm(proj) ** 2 <= total + 1e-10
        g = lambda y: 1.0 + 0.3 * SQRT2 * np.cos(np.pi * y)
        proj_g = project_callable(g, b)
        total_g = float(w @ g(t) ** 2)
        assert norm(proj_g) ** 2 == pytest.approx(total_g, abs=1e-6)

    def test_nonfinite_rejected_and_small_quadrature_rejected(self):
        b = Basis("cosine", 4)
        with pytest.raises(ValueError):
            project_callable(lambda y: np.full_like(y, np.inf), b)
        with pytest.raises(ValueError):
            project_callable(lambda y: y, b, n_quad=64)


class TestSincKernel:
    def test_diagonal_limit(self):
        assert sinc_kernel(0.7, 0.7, 2.0) == pytest.approx(2.0 / np.pi, abs=1e-14)

    def test_symmetry(self):
        assert sinc_kernel(1.3, -0.4, 2.0) == pytest.approx(sinc_kernel(-0.4, 1.3, 2.0), abs=1e-15)

    def test_continuity_at_taylor_cutoff(self):
        b = 2.0
        u = 1e-4 / b
        below = sinc_kernel(0.0, u * (1 - 1e-6), b)
        above = sinc_kernel(0.0, u * (1 + 1e-6), b)
        assert abs(below - above) < 1e-12

    def test_squared_norm_is_b_over_pi(self):
        # dense trapezoid quadrature over a wide window
        b = 2.0
        t = np.arange(-2000.0, 2000.0, 0.02)
        vals = sinc_kernel(0.3, t, b)
        integral = np.trapezoid(vals * vals, t)
        assert integral == pytest.approx(b / np.pi, abs=1e-4)

    def test_invalid_bandlimit(self):
        with pytest.raises(ValueError):
            sinc_kernel(0.0, 1.0, 0.0)


class TestQuadGrid:
    def test_uniform01_nodes_and_scales(self):
        g = QuadGrid.uniform01(9)
        assert np.allclose(g.points, np.arange(1, 10) / 10.0)
        assert np.allclose(g.scales, 1.0 / 3.0)

    def test_gaussian_importance_quantile_nodes(self):
        from scipy.stats import norm as snorm

        g = QuadGrid.gaussian_importance(63, 1.0, 2.0)
        u = snorm.cdf(g.points, loc=1.0, scale=2.0)
        assert np.abs(u - np.arange(1, 64) / 64.0).max() < 1e-12

    def test_dm_constant_function(self):
        g = QuadGrid.uniform01(128)
        v = dm_map(lambda t: 3.0, g)
        assert np.allclose(v, 3.0 / np.sqrt(128))
        assert v @ v == pytest.approx(9.0)

    def test_dm_handles_sinc_diagonal(self):
        g = QuadGrid.gaussian_importance(256, 0.0, 10.0)
        v = dm_map(lambda t: sinc_kernel(g.points[100], t, 2.0), g)
        assert np.all(np.isfinite(v))

    def test_dm_inner_product_matches_dense_oracle(self):
        # bandlimited test pair against a 10^6-point trapezoid oracle
        b = 2.0
        f = lambda t: sinc_kernel(-1.0, t, b) + 0.5 * sinc_kernel(2.0, t, b)
        g = lambda t: sinc_kernel(0.5, t, b) - 0.25 * sinc_kernel(-3.0, t, b)
        grid = QuadGrid.gaussian_importance(2048, 0.0, 50.0)
        approx = dm_map(f, grid) @ dm_map(g, grid)
        t = np.linspace(-500.0, 500.0, 1_000_000)
        oracle = np.trapezoid(f(t) * g(t), t)
        assert abs(approx - oracle) < 1e-3

    def test_nonfinite_rejected(self):
        g = QuadGrid.uniform01(16)
        with pytest.raises(ValueError):
            dm_map(lambda t: np.where(t > 0.5, np.inf, 1.0), g)
