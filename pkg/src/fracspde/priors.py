"""Priors and penalty calibration.

Stationary parameters get weakly informative priors driven by a handful of
interpretable hyperparameters: prior medians for range, marginal standard
deviation and noise standard deviation; a tail bound for the anisotropy
ratio; and a mean plus highest-posterior-density width for the smoothness.
Non-stationary basis coefficients get mean-zero Gaussians whose diagonal
precision follows the Laplacian spectrum of the basis, with an overall
penalty factor tau calibrated by Monte Carlo so that large deviations from
the stationary level are rare.

The log-density functions accept either plain floats or reverse-mode tape
variables, so the same formulas are used for evaluation and for gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq
from scipy.stats import beta as beta_dist

from .autodiff import Var
from .fields import BasisSpec, basis_eval

__all__ = [
    "PriorConfig",
    "SpectralPenalty",
    "derive_hyper",
    "log_prior_stationary",
    "q_ns_diagonal",
    "log_prior_nonstationary",
    "calibrate_penalty",
    "beta_hpd_width",
]

LN2 = float(np.log(2.0))


# -- float/tape-generic scalar helpers -------------------------------------


def _log(x):
    return x.tape.log(x) if isinstance(x, Var) else float(np.log(x))


def _dot(a, b):
    if isinstance(a, Var):
        return a.tape.dot(a, b)
    if isinstance(b, Var):
        return b.tape.dot(a, b)
    return float(np.dot(a, b))


def _value(x):
    return float(x.value) if isinstance(x, Var) else float(x)


@dataclass(frozen=True)
class PriorConfig:
    """User hyperparameters plus derived prior constants.

    The penalty factors ``tau_kappa``/``tau_sigma``/``tau_v`` are filled by
    :func:`calibrate_penalty` (they need a basis and a random seed); they
    stay None for purely stationary models.
    """

    c_rho: float
    c_sigma: float
    c_a: float
    c_nu: float
    c_nu_hpd: float
    nu_max: float
    c_sigma_n: float
    c_ns_rho: float | None = None
    c_ns_sigma: float | None = None
    c_ns_v: float | None = None
    # derived
    lambda_rho: float = 0.0
    lambda_sigma: float = 0.0
    lambda_sigma_n: float = 0.0
    sigma_v: float = 0.0
    p: float = 0.0
    q: float = 0.0
    tau_kappa: float | None = None
    tau_sigma: float | None = None
    tau_v: float | None = None
    tau_beta: float = 1e-6


def beta_hpd_width(p, q, mass=0.95):
    """Width of the minimal interval holding ``mass`` of a Beta(p, q)."""
    def width(u):
        return beta_dist.ppf(u + mass, p, q) - beta_dist.ppf(u, p, q)

    # golden-section over the free tail mass
    lo, hi = 0.0, 1.0 - mass
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = width(c), width(d)
    for _ in range(80):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = width(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = width(d)
    u = (a + b) / 2.0
    return width(u)


def _solve_beta_shape(c_nu, c_nu_hpd, nu_max):
    """(p, q) with mean c_nu and 95% HPD width c_nu_hpd on (0, nu_max)."""
    mean = c_nu / nu_max
    target = c_nu_hpd / nu_max

    def width_of(s):
        return beta_hpd_width(s * mean, s * (1.0 - mean))

    s_lo, s_hi = 1e-2, 1e7
    w_lo, w_hi = width_of(s_lo), width_of(s_hi)
    if not w_hi < target < w_lo:
        raise ValueError(
            f"HPD width {c_nu_hpd:g} infeasible for mean {c_nu:g} on (0, {nu_max:g}); "
            f"feasible range is about ({w_hi * nu_max:.3g}, {w_lo * nu_max:.3g})"
        )
    s = brentq(lambda t: width_of(np.exp(t)) - target, np.log(s_lo), np.log(s_hi), xtol=1e-10)
    s = float(np.exp(s))
    return s * mean, s * (1.0 - mean)


def derive_hyper(
    c_rho,
    c_sigma,
    c_a,
    c_nu,
    c_nu_hpd,
    nu_max,
    c_sigma_n,
    c_ns_rho=None,
    c_ns_sigma=None,
    c_ns_v=None,
    tau_beta=1e-6,
) -> PriorConfig:
    """Resolve user hyperparameters into prior constants.

    Medians: P(rho <= C_rho) = P(sigma <= C_sigma) = P(sigma_N <= C_sigmaN)
    = 1/2.  Anisotropy: with v ~ N(0, sigma_v^2 I), |v|^2/sigma_v^2 is
    chi-square(2), so P(a > C_a) = 0.05 gives
    sigma_v = log(C_a)/sqrt(2 log 20).  Smoothness: scaled Beta with mean
    C_nu and 95% HPD width C_nu_hpd.
    """
    for name, val in (
        ("c_rho", c_rho),
        ("c_sigma", c_sigma),
        ("c_nu", c_nu),
        ("c_nu_hpd", c_nu_hpd),
        ("nu_max", nu_max),
        ("c_sigma_n", c_sigma_n),
    ):
        if val <= 0.0:
            raise ValueError(f"{name} must be positive, got {val:g}")
    if c_a <= 1.0:
        raise ValueError(f"c_a must exceed 1, got {c_a:g}")
    if not c_nu < nu_max:
        raise ValueError(f"c_nu = {c_nu:g} must lie below nu_max = {nu_max:g}")
    p, q = _solve_beta_shape(c_nu, c_nu_hpd, nu_max)
    return PriorConfig(
        c_rho=c_rho,
        c_sigma=c_sigma,
        c_a=c_a,
        c_nu=c_nu,
        c_nu_hpd=c_nu_hpd,
        nu_max=nu_max,
        c_sigma_n=c_sigma_n,
        c_ns_rho=c_ns_rho,
        c_ns_sigma=c_ns_sigma,
        c_ns_v=c_ns_v,
        lambda_rho=c_rho * LN2,
        lambda_sigma=LN2 / c_sigma,
        lambda_sigma_n=LN2 / c_sigma_n,
        sigma_v=float(np.log(c_a) / np.sqrt(2.0 * np.log(20.0))),
        p=p,
        q=q,
        tau_beta=tau_beta,
    )


def log_prior_stationary(
    rho0, sigma0, vx0, vy0, nu, sigma_n, config: PriorConfig, include_nu=True
):
    """Sum of stationary prior log-densities (normalizing constants included).

    Range: pi(rho) = lambda_rho rho^-2 exp(-lambda_rho/rho) (median C_rho).
    Marginal sd and noise sd: exponential with medians C_sigma, C_sigmaN.
    Anisotropy: (v_x0, v_y0) ~ N(0, sigma_v^2 I), which induces the wanted
    tail P(a > C_a) = 0.05 and a uniform orientation.
    Smoothness: scaled Beta(p, q) on (0, nu_max); outside -> -inf.  Model
    classes that fix nu pass include_nu=False to drop that factor.
    """
    if include_nu:
        nu_val = _value(nu)
        if not 0.0 < nu_val < config.nu_max:
            return -np.inf
    lp = (
        np.log(config.lambda_rho)
        - 2.0 * _log(rho0)
        - config.lambda_rho / rho0
    )
    lp = lp + np.log(config.lambda_sigma) - config.lambda_sigma * sigma0
    s2 = config.sigma_v**2
    lp = lp - np.log(2.0 * np.pi * s2) - (vx0 * vx0 + vy0 * vy0) / (2.0 * s2)
    if include_nu:
        from scipy.special import betaln

        x = nu / config.nu_max
        lp = (
            lp
            + (config.p - 1.0) * _log(x)
            + (config.q - 1.0) * _log(1.0 - x)
            - float(betaln(config.p, config.q))
            - np.log(config.nu_max)
        )
    lp = lp + np.log(config.lambda_sigma_n) - config.lambda_sigma_n * sigma_n
    return lp


# -- non-stationary coefficients -------------------------------------------


def q_ns_diagonal(spec: BasisSpec) -> np.ndarray:
    """Diagonal precision entries [(pi k/A)^2 + (pi l/B)^2]^2 over the basis."""
    x0, x1, y0, y1 = spec.rect
    A, B = x1 - x0, y1 - y0
    return np.array(
        [((np.pi * k / A) ** 2 + (np.pi * l / B) ** 2) ** 2 for k, l in spec.indices]
    )


@dataclass(frozen=True)
class SpectralPenalty:
    """Q_NS diagonal plus per-field penalty factors."""

    q_diag: np.ndarray
    tau_kappa: float
    tau_sigma: float
    tau_v: float


def _gauss_diag_logpdf(alpha, tau, q_diag):
    m = len(q_diag)
    const = 0.5 * float(np.sum(np.log(q_diag))) + 0.5 * m * np.log(tau) - 0.5 * m * np.log(2.0 * np.pi)
    return const - 0.5 * tau * _dot(alpha, _mulconst(alpha, q_diag))


def _mulconst(alpha, arr):
    if isinstance(alpha, Var):
        return alpha * arr
    return np.asarray(alpha) * arr


def log_prior_nonstationary(alpha_kappa, alpha_sigma, alpha_vx, alpha_vy, penalty: SpectralPenalty):
    """Gaussian log-density of the basis coefficients, summed over fields.

    Fields with empty (length-zero) coefficient vectors contribute nothing.
    """
    q = penalty.q_diag
    lp = 0.0
    for alpha, tau in (
        (alpha_kappa, penalty.tau_kappa),
        (alpha_sigma, penalty.tau_sigma),
        (alpha_vx, penalty.tau_v),
        (alpha_vy, penalty.tau_v),
    ):
        if alpha is None:
            continue
        size = alpha.shape[0] if isinstance(alpha, Var) else len(alpha)
        if size == 0:
            continue
        if size != len(q):
            raise ValueError(f"coefficient length {size} != basis size {len(q)}")
        lp = _gauss_diag_logpdf(alpha, tau, q) + lp
    return lp


# -- penalty calibration ---------------------------------------------------


def calibrate_penalty(
    field: str,
    threshold: float,
    spec: BasisSpec,
    rng,
    grid_n: int = 25,
    n_mc: int = 2000,
) -> float:
    """Penalty tau for one field by bisection on a Monte-Carlo exceedance.

    The non-stationary deviation at scale tau is tau^(-1/2) sum_i z_i
    f_i(s) with z ~ N(0, Q_NS^{-1}); tau is chosen so that the probability
    of the max over a regular grid exceeding log(threshold) is 0.05 (within
    [0.045, 0.055]).  ``field`` is "rho", "sigma" (scalar statistics,
    |sum alpha f|) or "v" (vector statistic, |(v_x, v_y)|).  When even the
    weakest penalty in the bracket keeps the exceedance below target (e.g.
    threshold -> infinity), the lower bracket bound is returned.
    """
    if field not in ("rho", "sigma", "v"):
        raise ValueError(f"unknown field {field!r}")
    if threshold <= 1.0:
        raise ValueError(f"threshold must exceed 1, got {threshold:g}")
    if n_mc < 1000:
        raise ValueError(f"n_mc must be at least 1000, got {n_mc}")
    x0, x1, y0, y1 = spec.rect
    gx = np.linspace(x0, x1, grid_n)
    gy = np.linspace(y0, y1, grid_n)
    X, Y = np.meshgrid(gx, gy)
    F = basis_eval(spec, np.column_stack([X.ravel(), Y.ravel()]))
    sd = 1.0 / np.sqrt(q_ns_diagonal(spec))

    # per-draw maxima of the unscaled field; tau only rescales them
    if field == "v":
        z = rng.standard_normal((n_mc, 2, spec.size)) * sd
        vx = z[:, 0] @ F.T
        vy = z[:, 1] @ F.T
        base = np.hypot(vx, vy).max(axis=1)
    else:
        z = rng.standard_normal((n_mc, spec.size)) * sd
        base = np.abs(z @ F.T).max(axis=1)

    log_c = np.log(threshold)
    lo, hi = -20.0, 20.0

    def exceed(log_tau):
        return float(np.mean(base > np.exp(0.5 * log_tau) * log_c))

    if exceed(lo) < 0.045:
        return float(np.exp(lo))
    if exceed(hi) > 0.055:
        raise ValueError(
            f"penalty bisection bracket [{lo:g}, {hi:g}] cannot reach the "
            f"target exceedance for threshold {threshold:g}"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        p = exceed(mid)
        if 0.045 <= p <= 0.055:
            return float(np.exp(mid))
        if p > 0.055:
            lo = mid
        else:
            hi = mid
    raise ValueError("penalty bisection failed to settle inside the target window")
