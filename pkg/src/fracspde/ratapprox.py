"""Rational approximation of fractional powers of the elliptic operator.

For non-integer exponents beta the weight precision is not a polynomial in
the assembled matrices, so x^beta is replaced on the (rescaled) spectral
interval by a rational function

    r(x) = x^{k_beta} * N(x) / D(x),      k_beta = max{1, floor(beta)},

with deg N = k and deg D = k + 1.  N/D approximates x^{beta - k_beta} on
[eps, 1] and is computed with a Chebyshev-Pade construction: expand the
target in Chebyshev polynomials, then impose the cross-multiplied
conditions [D*f - N]_i = 0 for i = 0..2k+1 with D_0 = 1 (Maehly's
linearization).  The construction is linear algebra on Chebyshev
coefficients, which keeps it differentiable in beta; the same code path
runs on plain arrays and on reverse-mode tape variables.

Matrix side: with B = C^{-1} K and K = kappa_min^{-2} L, the weight
distribution is w = P_R wtilde, wtilde ~ N(0, Qtilde^{-1}),

    P_L = B^{k_beta - 1} * sum_j D_j B^{k+1-j},
    P_R = kappa_min^{-2 beta} * sum_j N_j B^{k-j},
    Qtilde = P_L^T (C C_tau2^{-1} C) P_L,

which reduces to P_R = I, P_L = (C^{-1} L)^beta when beta is an integer.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

from . import sparse_core as sc
from .fem import FemMatrices, symmetrize
from .sparse_core import SparseSpd

__all__ = [
    "RationalCoeffs",
    "FracOperator",
    "snap_integer_beta",
    "cheb_pade",
    "cheb_pade_tape",
    "assemble_frac",
    "sample_weights",
    "dump_coeffs",
]

#: width of the window around integers inside which beta takes the exact
#: integer path instead of a rational fit; kept strictly smaller than the
#: image of the optimizer's integer-avoiding nu clamp (half-width 1e-3 in
#: nu, hence 5e-4 in beta) so a clamped fractional fit never degenerates
INTEGER_SNAP_TOL = 1e-4

_NCHEB = 512  # interpolation degree for the Chebyshev expansion of x^(beta-k_beta)
_SCAN_POINTS = 10_000


def snap_integer_beta(beta, tol=INTEGER_SNAP_TOL):
    """Nearest positive integer when beta is within tol of one, else None."""
    b = float(beta)
    r = round(b)
    if r >= 1 and abs(b - r) <= tol:
        return int(r)
    return None


@dataclass(frozen=True)
class RationalCoeffs:
    """Fitted coefficients; ``num``/``den`` are ascending-power arrays.

    ``integer`` is set (and the coefficients are unused) when beta took
    the exact integer path.
    """

    beta: float
    k: int
    eps: float
    k_beta: int
    num: np.ndarray
    den: np.ndarray
    sup_error: float
    integer: int | None = None

    def evaluate(self, x):
        """r(x) on the fit variable; exact power on the integer path."""
        x = np.asarray(x, dtype=np.float64)
        if self.integer is not None:
            return x**self.integer
        N = np.polynomial.polynomial.polyval(x, self.num)
        D = np.polynomial.polynomial.polyval(x, self.den)
        return x**self.k_beta * N / D


# -- constant matrices of the construction (depend on eps and k only) ------


@lru_cache(maxsize=None)
def _cheb_interp_matrix(eps, ncoef, ncheb=_NCHEB):
    """Linear map from f(x_j) at Chebyshev extreme points on [eps, 1] to the
    first ncoef Chebyshev coefficients of the degree-ncheb interpolant."""
    j = np.arange(ncheb + 1)
    t = np.cos(np.pi * j / ncheb)
    x = 0.5 * (1.0 + eps) + 0.5 * (1.0 - eps) * t
    T = np.cos(np.pi * np.outer(j[:ncoef], j) / ncheb)
    w = np.full(ncheb + 1, 2.0 / ncheb)
    w[0] = w[-1] = 1.0 / ncheb
    W = T * w
    W[0] *= 0.5
    if ncoef == ncheb + 1:
        W[-1] *= 0.5
    return x, W


@lru_cache(maxsize=None)
def _product_tensor(m, n):
    """T[i][j,k]: coefficient of T_i in T_j * T_k (i<=m+n, j<=n, k<=m+2n)."""
    ni, nj, nk = m + n + 1, n + 1, m + 2 * n + 1
    G = np.zeros((nk, ni, nj))
    for jj in range(nj):
        for kk in range(nk):
            s, d = jj + kk, abs(jj - kk)
            if s < ni:
                G[kk, s, jj] += 0.5
            if d < ni:
                G[kk, d, jj] += 0.5
    return G


@lru_cache(maxsize=None)
def _cheb_to_power_matrix(eps, deg):
    """Map Chebyshev coefficients on [eps, 1] to ascending raw-power
    coefficients in the original variable."""
    a = 2.0 / (1.0 - eps)
    b = -(1.0 + eps) / (1.0 - eps)
    out = np.zeros((deg + 1, deg + 1))
    for col in range(deg + 1):
        e = np.zeros(col + 1)
        e[col] = 1.0
        poly_t = np.polynomial.chebyshev.cheb2poly(e)
        # substitute t = a x + b
        for jd, cj in enumerate(poly_t):
            for i in range(jd + 1):
                out[i, col] += cj * comb(jd, i) * a**i * b ** (jd - i)
    return out


# -- scalar construction ---------------------------------------------------


def _fit(ops, beta, k, eps):
    """Shared fit routine; ``ops`` abstracts plain numpy vs tape arithmetic.

    Returns (num, den) ascending-power coefficient vectors of length k+1
    and k+2 in the backend's value type.
    """
    kb = max(1, int(np.floor(float(ops.value(beta)))))
    m, n = k, k + 1
    x, W = _cheb_interp_matrix(eps, m + 2 * n + 1)
    f = ops.exp(ops.mul_scalar(ops.sub_const(beta, float(kb)), np.log(x)))
    c = ops.matmul(W, f)
    A = ops.tensordot(c, _product_tensor(m, n))  # (m+n+1, n+1)
    qtail = ops.solve(ops.index(A, (slice(m + 1, None), slice(1, None))),
                      ops.neg(ops.index(A, (slice(m + 1, None), 0))))
    q = ops.concat_one(qtail)
    p = ops.matmul_var(ops.index(A, (slice(None, m + 1), slice(None))), q)
    num = ops.matmul(_cheb_to_power_matrix(eps, m), p)
    den = ops.matmul(_cheb_to_power_matrix(eps, n), q)
    return num, den, kb


class _NumpyOps:
    @staticmethod
    def value(v):
        return v

    @staticmethod
    def exp(v):
        return np.exp(v)

    @staticmethod
    def mul_scalar(s, arr):
        return s * arr

    @staticmethod
    def sub_const(v, c):
        return v - c

    @staticmethod
    def matmul(const_m, v):
        return const_m @ v

    matmul_var = matmul

    @staticmethod
    def tensordot(c, T):
        return np.tensordot(c, T, axes=([0], [0]))

    @staticmethod
    def solve(a, b):
        return np.linalg.solve(a, b)

    @staticmethod
    def neg(v):
        return -v

    @staticmethod
    def index(v, key):
        return v[key]

    @staticmethod
    def concat_one(tail):
        return np.concatenate([[1.0], tail])


class _TapeOps:
    def __init__(self, tape):
        self.t = tape

    def value(self, v):
        return self.t._val(v)

    def exp(self, v):
        return self.t.exp(v)

    def mul_scalar(self, s, arr):
        return self.t.mul(s, self.t.constant(arr))

    def sub_const(self, v, c):
        return self.t.sub(v, self.t.constant(c))

    def matmul(self, const_m, v):
        return self.t.matmul(const_m, v)

    def matmul_var(self, a, b):
        return self.t.matmul(a, b)

    def tensordot(self, c, T):
        return self.t.tensordot_const(c, T)

    def solve(self, a, b):
        return self.t.solve_dense(a, b)

    def neg(self, v):
        return self.t.sub(self.t.constant(0.0), v)

    def index(self, v, key):
        return self.t.getitem(v, key)

    def concat_one(self, tail):
        return self.t.concat([self.t.constant(1.0), tail])


def _scan(num, den, beta, k_beta, eps):
    """Sup-error on a dense grid; raises if the denominator changes sign."""
    xs = np.linspace(eps, 1.0, _SCAN_POINTS)
    D = np.polynomial.polynomial.polyval(xs, den)
    if np.any(D <= 0.0):
        raise ArithmeticError(
            f"rational denominator has a root in [{eps:g}, 1] "
            f"(beta={beta:g}, k={len(num) - 1})"
        )
    N = np.polynomial.polynomial.polyval(xs, num)
    return float(np.max(np.abs(xs**k_beta * N / D - xs**beta)))


def cheb_pade(beta, k, eps=1e-4) -> RationalCoeffs:
    """Fit r(x) ~ x^beta on [eps, 1]; exact bypass near integer beta."""
    beta = float(beta)
    if not 0.5 < beta:
        raise ValueError(f"beta must exceed 1/2, got {beta:g}")
    if k < 1:
        raise ValueError(f"approximation order k must be >= 1, got {k}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps:g}")
    snapped = snap_integer_beta(beta)
    if snapped is not None:
        return RationalCoeffs(
            beta, k, eps, snapped, np.ones(1), np.ones(1), 0.0, integer=snapped
        )
    num, den, kb = _fit(_NumpyOps, beta, k, eps)
    sup = _scan(num, den, beta, kb, eps)
    return RationalCoeffs(beta, k, eps, kb, num, den, sup)


def cheb_pade_tape(tape, beta_var, k, eps=1e-4):
    """Tape version: (num, den, k_beta, sup_error) with Var coefficients.

    The caller is responsible for dispatching near-integer beta to the
    integer path before calling this.
    """
    num, den, kb = _fit(_TapeOps(tape), beta_var, k, eps)
    sup = _scan(tape._val(num), tape._val(den), tape._val(beta_var), kb, eps)
    return num, den, kb, sup


# -- operator assembly -----------------------------------------------------


class FracOperator:
    """P_L, P_R and the weight precision Qtilde for one coefficient set."""

    __slots__ = ("P_L", "P_R", "Qtilde", "kappa_min", "coeffs", "_factor")

    def __init__(self, P_L, P_R, Qtilde, kappa_min, coeffs):
        self.P_L = P_L
        self.P_R = P_R
        self.Qtilde = Qtilde
        self.kappa_min = kappa_min
        self.coeffs = coeffs
        self._factor = None

    @property
    def factor(self):
        if self._factor is None:
            self._factor = sc.cholesky(self.Qtilde)
        return self._factor


def _matrix_poly(B: SparseSpd, coefs) -> SparseSpd:
    """sum_j coefs[j] * B^(p-j) for ascending coefs of length p+1 (Horner)."""
    n = B.n
    S = sc.identity(n).with_values(np.full(n, coefs[0]))
    for a in coefs[1:]:
        S = sc.add(sc.matmul(S, B), sc.identity(n), 1.0, a)
    return S


def assemble_frac(fem: FemMatrices, kappa_centroids, coeffs: RationalCoeffs) -> FracOperator:
    """Assemble P_L, P_R and Qtilde from assembled FEM matrices.

    ``kappa_centroids`` supplies kappa(s_T) for the rescaling constant
    kappa_min = min_T kappa(s_T).
    """
    kappa_min = float(np.min(kappa_centroids))
    if kappa_min <= 0.0:
        raise ValueError("kappa must be positive at every centroid")
    n = fem.L.n
    X = sc.scale_rows(1.0 / fem.c, fem.L)  # C^{-1} L
    if coeffs.integer is not None:
        P_R = sc.identity(n)
        P_L = X
        for _ in range(coeffs.integer - 1):
            P_L = sc.matmul(P_L, X)
    else:
        B = sc.scale_rows(np.full(n, kappa_min**-2), X)
        P_L = _matrix_poly(B, coeffs.den)
        for _ in range(coeffs.k_beta - 1):
            P_L = sc.matmul(P_L, B)
        P_R = _matrix_poly(B, kappa_min ** (-2.0 * coeffs.beta) * coeffs.num)
    mid = fem.c * fem.c / fem.c_t2
    Qtilde = symmetrize(sc.matmul(P_L.transpose(), sc.scale_rows(mid, P_L)))
    return FracOperator(P_L, P_R, Qtilde, kappa_min, coeffs)


def sample_weights(frac: FracOperator, rng) -> np.ndarray:
    """One draw of the FEM weights w = P_R wtilde, wtilde ~ N(0, Qtilde^{-1})."""
    z = rng.standard_normal(frac.Qtilde.n)
    return frac.P_R.matvec(frac.factor.sqrt_solve_t(z))


def dump_coeffs(path, coeffs: RationalCoeffs):
    """Write the fitted coefficients as plain text for cross-checking."""
    with open(path, "w") as fh:
        fh.write(f"beta {coeffs.beta:.17g}\n")
        fh.write(f"k {coeffs.k}\n")
        fh.write(f"eps {coeffs.eps:.17g}\n")
        fh.write(f"k_beta {coeffs.k_beta}\n")
        fh.write(f"integer {coeffs.integer if coeffs.integer is not None else 'none'}\n")
        fh.write(f"sup_error {coeffs.sup_error:.17g}\n")
        fh.write("numerator " + " ".join(f"{c:.17g}" for c in coeffs.num) + "\n")
        fh.write("denominator " + " ".join(f"{c:.17g}" for c in coeffs.den) + "\n")
