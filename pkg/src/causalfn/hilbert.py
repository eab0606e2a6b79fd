"""Function-space primitives: orthonormal bases, coefficient arithmetic,
shrinkage maps, quadrature grids, and kernel evaluations.

Functions on an interval are represented by their generalized Fourier
coefficients against a declared orthonormal basis, truncated at ``k_max``.
Elements of the bandlimited (sinc) RKHS are handled through finite
quadrature grids (see :class:`QuadGrid` and :func:`dm_map`).
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss, legvander
from scipy.stats import norm as _norm

__all__ = [
    "Basis",
    "L2Fn",
    "RegSeq",
    "QuadGrid",
    "eval_basis",
    "inner",
    "norm",
    "gamma_beta",
    "gamma_beta_inv",
    "seminorm_beta",
    "sobolev_norm_u",
    "project_callable",
    "sinc_kernel",
    "gaussian_kernel",
    "dm_map",
]

DEFAULT_K_MAX = 64

# Switch to a Taylor expansion of sin(u)/u this close to the sinc diagonal
# to avoid catastrophic cancellation.
_SINC_TAYLOR_CUTOFF = 1e-4


@dataclass(frozen=True)
class Basis:
    """Orthonormal basis of L2 on an interval.

    ``cosine``: h_1 = 1 and h_k(t) = sqrt(2) cos(pi (k-1) t) for k >= 2 on
    [0, 1] (the first element is the unit constant so the system stays
    orthonormal).  ``legendre``: fully normalized shifted Legendre
    polynomials sqrt(2k-1) P_{k-1}(2t - 1).  Bases on [lo, hi] are the
    rescaled [0, 1] systems.
    """

    kind: str = "cosine"
    k_max: int = DEFAULT_K_MAX
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cosine", "legendre"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if not self.lo < self.hi:
            raise ValueError("basis domain must satisfy lo < hi")

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def eval_matrix(self, y) -> np.ndarray:
        """Evaluate all basis elements at points ``y``; shape (len(y), k_max)."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        t = (y - self.lo) / self.width
        if self.kind == "cosine":
            k = np.arange(self.k_max)
            mat = np.sqrt(2.0) * np.cos(np.pi * np.outer(t, k))
            mat[:, 0] = 1.0
        else:
            mat = legvander(2.0 * t - 1.0, self.k_max - 1)
            mat = mat * np.sqrt(2.0 * np.arange(self.k_max) + 1.0)
        return mat / np.sqrt(self.width)

    def same_as(self, other: "Basis") -> bool:
        return (
            self.kind == other.kind
            and self.k_max == other.k_max
            and self.lo == other.lo
            and self.hi == other.hi
        )


def eval_basis(basis: Basis, k: int, y: float) -> float:
    """Evaluate the k-th (1-indexed) basis element at a point."""
    if not 1 <= k <= basis.k_max:
        raise ValueError(f"basis index k={k} outside 1..{basis.k_max}")
    y = float(y)
    if not basis.lo <= y <= basis.hi:
        raise ValueError(f"evaluation point {y} outside [{basis.lo}, {basis.hi}]")
    return float(basis.eval_matrix(np.array([y]))[0, k - 1])


@dataclass(frozen=True)
class L2Fn:
    """An element of L2 stored by its basis coefficients."""

    basis: Basis
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.basis.k_max,):
            raise ValueError(
                f"expected {self.basis.k_max} coefficients, got shape {c.shape}"
            )
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficient")
        object.__setattr__(self, "coeffs", c)

    def __call__(self, y) -> np.ndarray:
        return self.basis.eval_matrix(y) @ self.coeffs


def _check_same_basis(f: L2Fn, g: L2Fn) -> None:
    if not f.basis.same_as(g.basis):
        raise ValueError("basis mismatch between L2 elements")


def inner(f: L2Fn, g: L2Fn) -> float:
    _check_same_basis(f, g)
    return float(f.coeffs @ g.coeffs)


def norm(f: L2Fn) -> float:
    return float(np.sqrt(f.coeffs @ f.coeffs))


@dataclass(frozen=True)
class RegSeq:
    """Regularization sequence beta in l2 with entries in [0, 1].

    ``hard``: beta_k = 1{k <= K}.  ``rational``: beta_k = 1 / (1 + (k/c)^p)
    with p > 1/2 so the sequence is square summable.
    """

    rule: str
    k_threshold: int | None = None
    c: float | None = None
    p: float | None = None
    data_selected: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.rule == "hard":
            if self.k_threshold is None or self.k_threshold < 0:
                raise ValueError("hard-threshold rule needs K >= 0")
        elif self.rule == "rational":
            if self.c is None or self.c <= 0:
                raise ValueError("rational rule needs c > 0")
            if self.p is None or self.p <= 0.5:
                raise ValueError("rational rule needs p > 1/2 for square summability")
        else:
            raise ValueError(f"unknown regularization rule {self.rule!r}")

    @staticmethod
    def hard(k: int) -> "RegSeq":
        return RegSeq(rule="hard", k_threshold=k)

    @staticmethod
    def rational(c: float, p: float) -> "RegSeq":
        return RegSeq(rule="rational", c=c, p=p)

    def materialize(self, k_max: int) -> np.ndarray:
        k = np.arange(1, k_max + 1)
        if self.rule == "hard":
            return (k <= self.k_threshold).astype(float)
        return 1.0 / (1.0 + (k / self.c) ** self.p)

    def label(self) -> str:
        if self.rule == "hard":
            return f"hard:{self.k_threshold}"
        return f"rational:c={self.c:g},p={self.p:g}"


def gamma_beta(f: L2Fn, beta: RegSeq) -> L2Fn:
    """Coefficient-shrinkage map: multiply coefficient k by beta_k."""
    return L2Fn(f.basis, f.coeffs * beta.materialize(f.basis.k_max))


def gamma_beta_inv(f: L2Fn, beta: RegSeq) -> L2Fn:
    b = beta.materialize(f.basis.k_max)
    if np.any(b == 0.0):
        raise ValueError("shrinkage map is not invertible: some beta_k = 0")
    return L2Fn(f.basis, f.coeffs / b)


def seminorm_beta(f: L2Fn, beta: RegSeq) -> float:
    b = beta.materialize(f.basis.k_max)
    return float(np.sqrt(np.sum((b * f.coeffs) ** 2)))


def sobolev_norm_u(f: L2Fn, u: float) -> float:
    """Diagnostic norm sqrt(sum_k k^{2u} coeff_k^2) at the truncation level."""
    if u < 0:
        raise ValueError("u must be nonnegative")
    k = np.arange(1, f.basis.k_max + 1, dtype=float)
    return float(np.sqrt(np.sum(k ** (2.0 * u) * f.coeffs**2)))


@functools.lru_cache(maxsize=8)
def _leggauss_cached(n: int):
    return leggauss(n)


def gauss_legendre(n: int, lo: float, hi: float):
    """Gauss-Legendre nodes and weights on [lo, hi]."""
    x, w = _leggauss_cached(n)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return mid + half * x, half * w


def project_callable(f, basis: Basis, n_quad: int = 2048) -> L2Fn:
    """Project a pointwise-evaluable function onto the basis by quadrature.

    Uses a Gauss-Legendre rule with ``n_quad`` nodes on the basis domain.
    """
    if n_quad < 128:
        raise ValueError("n_quad must be >= 128")
    t, w = gauss_legendre(n_quad, basis.lo, basis.hi)
    vals = np.asarray(f(t), dtype=float)
    if vals.shape != t.shape:
        vals = np.broadcast_to(vals, t.shape).astype(float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite function value in quadrature")
    return L2Fn(basis, basis.eval_matrix(t).T @ (w * vals))


def sinc_kernel(y, y_tilde, b: float):
    """Reproducing kernel of the b-bandlimited subspace of L2(R).

    K_y(y~) = sin(b (y~ - y)) / (pi (y~ - y)), with the diagonal limit b/pi.
    """
    if b <= 0:
        raise ValueError("bandlimit b must be positive")
    y = np.asarray(y, dtype=float)
    y_tilde = np.asarray(y_tilde, dtype=float)
    u = b * (y_tilde - y)
    small = np.abs(u) < _SINC_TAYLOR_CUTOFF
    u_safe = np.where(small, 1.0, u)
    out = np.where(
        small,
        (b / np.pi) * (1.0 - u**2 / 6.0 + u**4 / 120.0 - u**6 / 5040.0),
        np.sin(u_safe) / (np.pi * u_safe / b),
    )
    if out.ndim == 0:
        return float(out)
    return out


def gaussian_kernel(y, y_tilde, bandwidth: float):
    """Gaussian kernel exp(-(y - y~)^2 / (2 bw^2)); unit diagonal."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    y = np.asarray(y, dtype=float)
    y_tilde = np.asarray(y_tilde, dtype=float)
    out = np.exp(-((y_tilde - y) ** 2) / (2.0 * bandwidth**2))
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class QuadGrid:
    """Finite-dimensional coordinate map for L2 inner products.

    D_m(h) = (h(t_k) s_k)_k, chosen so D_m(f)' D_m(g) -> <f, g> as m grows.
    """

    points: np.ndarray
    scales: np.ndarray
    variant: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        sc = np.asarray(self.scales, dtype=float)
        if pts.shape != sc.shape or pts.ndim != 1:
            raise ValueError("points and scales must be 1-d arrays of equal length")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "scales", sc)

    @property
    def m(self) -> int:
        return self.points.size

    @staticmethod
    def uniform01(m: int) -> "QuadGrid":
        k = np.arange(1, m + 1)
        return QuadGrid(k / (m + 1.0), np.full(m, m**-0.5), "uniform01")

    @staticmethod
    def gaussian_importance(m: int, mu: float, sigma: float) -> "QuadGrid":
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        u = np.arange(1, m + 1) / (m + 1.0)
        t = _norm.ppf(u, loc=mu, scale=sigma)
        s = (m * _norm.pdf(t, loc=mu, scale=sigma)) ** -0.5
        return QuadGrid(t, s, "gaussian_importance")


def dm_map(f, grid: QuadGrid) -> np.ndarray:
    """Apply D_m to a pointwise-evaluable function."""
    vals = np.asarray(f(grid.points), dtype=float)
    if vals.shape != grid.points.shape:
        vals = np.broadcast_to(vals, grid.points.shape).astype(float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite function value on quadrature grid")
    return vals * grid.scales
