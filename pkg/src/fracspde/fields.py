"""Spatially varying SPDE coefficients and their parameterizations.

Four scalar functions drive the operator: kappa (inverse range scale),
sigma (marginal standard deviation), and the anisotropy vector components
v_x, v_y.  Each is a stationary level plus a cosine-basis expansion over
the rectangle of interest; log-transforms keep kappa and sigma positive.
The anisotropy matrix H(v) has determinant one by construction, so its
eigenvalues are exp(+-|v|) and a single vector controls both the axis
ratio and the orientation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

__all__ = [
    "BasisSpec",
    "FieldParams",
    "basis_eval",
    "field_values",
    "h_from_v",
    "sinhc",
    "tau_field",
    "interpretable",
    "from_interpretable",
    "sigma0_from_tau0",
    "tau0_from_sigma0",
]


@dataclass(frozen=True)
class BasisSpec:
    """Cosine basis cos(k pi x') cos(l pi y') over a rectangle.

    The index set runs over 0 <= k <= M, 0 <= l <= N in lexicographic
    order (k major) with (0, 0) excluded, giving (M+1)(N+1)-1 functions.
    Normalization makes each function unit L2 norm on the rectangle.
    """

    M: int
    N: int
    rect: tuple  # (x0, x1, y0, y1)

    def __post_init__(self):
        if self.M < 0 or self.N < 0:
            raise ValueError("basis orders must be non-negative")
        x0, x1, y0, y1 = self.rect
        if x1 <= x0 or y1 <= y0:
            raise ValueError("basis rectangle must have positive area")

    @property
    def indices(self):
        """List of (k, l) pairs in order, (0,0) excluded."""
        return [
            (k, l)
            for k in range(self.M + 1)
            for l in range(self.N + 1)
            if (k, l) != (0, 0)
        ]

    @property
    def size(self):
        return (self.M + 1) * (self.N + 1) - 1


def basis_eval(spec: BasisSpec, points):
    """Evaluate all basis functions at the given points -> (npts, size).

    Points outside the rectangle are clamped to it coordinate-wise, so the
    fields continue as constants into the extension band.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x0, x1, y0, y1 = spec.rect
    A = x1 - x0
    B = y1 - y0
    x = (np.clip(pts[:, 0], x0, x1) - x0) / A
    y = (np.clip(pts[:, 1], y0, y1) - y0) / B
    out = np.empty((len(pts), spec.size))
    root_ab = np.sqrt(A * B)
    for col, (k, l) in enumerate(spec.indices):
        # C_kl = 2 (both frequencies nonzero) or sqrt(2) (one zero) makes
        # the function unit L2 norm on the rectangle.
        ckl = 2.0 if (k > 0 and l > 0) else np.sqrt(2.0)
        out[:, col] = ckl * np.cos(k * np.pi * x) * np.cos(l * np.pi * y) / root_ab
    return out


@dataclass
class FieldParams:
    """Stationary levels plus basis coefficients for the four fields.

    ``nu`` is the smoothness of the target field; the operator exponent is
    beta = (nu + 1) / 2.  Coefficient vectors must all have the basis size
    (zero-length vectors mean a fully stationary field).
    """

    log_kappa0: float
    log_sigma0: float
    vx0: float
    vy0: float
    nu: float
    alpha_kappa: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_vx: np.ndarray = field(default_factory=lambda: np.zeros(0))
    alpha_vy: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.alpha_kappa = np.asarray(self.alpha_kappa, dtype=np.float64)
        self.alpha_sigma = np.asarray(self.alpha_sigma, dtype=np.float64)
        self.alpha_vx = np.asarray(self.alpha_vx, dtype=np.float64)
        self.alpha_vy = np.asarray(self.alpha_vy, dtype=np.float64)
        lengths = {
            len(a)
            for a in (self.alpha_kappa, self.alpha_sigma, self.alpha_vx, self.alpha_vy)
            if len(a) > 0
        }
        if len(lengths) > 1:
            raise ValueError(f"coefficient vectors disagree in length: {sorted(lengths)}")

    @property
    def beta(self):
        return (self.nu + 1.0) / 2.0


def field_values(params: FieldParams, spec: BasisSpec | None, points):
    """Per-point (kappa, sigma, v_x, v_y) arrays."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    npts = len(pts)
    log_kappa = np.full(npts, params.log_kappa0)
    log_sigma = np.full(npts, params.log_sigma0)
    vx = np.full(npts, params.vx0)
    vy = np.full(npts, params.vy0)
    any_alpha = any(
        len(a)
        for a in (params.alpha_kappa, params.alpha_sigma, params.alpha_vx, params.alpha_vy)
    )
    if any_alpha:
        if spec is None:
            raise ValueError("basis coefficients given but no BasisSpec")
        F = basis_eval(spec, pts)
        for alpha, target in (
            (params.alpha_kappa, log_kappa),
            (params.alpha_sigma, log_sigma),
            (params.alpha_vx, vx),
            (params.alpha_vy, vy),
        ):
            if len(alpha):
                if len(alpha) != spec.size:
                    raise ValueError(
                        f"coefficient length {len(alpha)} != basis size {spec.size}"
                    )
                target += F @ alpha
    return np.exp(log_kappa), np.exp(log_sigma), vx, vy


def sinhc(x):
    """sinh(x)/x with a series fallback near zero."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    out = np.where(small, 1.0 + x * x / 6.0, np.sinh(safe) / safe)
    return out if out.ndim else float(out)


def h_from_v(vx, vy):
    """Anisotropy matrix entries (H11, H12, H22) for vector fields v.

    H = cosh(|v|) I + sinh(|v|)/|v| [[v_x, v_y], [v_y, -v_x]]; symmetric
    with unit determinant and eigenvalues exp(+-|v|).
    """
    vx = np.asarray(vx, dtype=np.float64)
    vy = np.asarray(vy, dtype=np.float64)
    r = np.hypot(vx, vy)
    ch = np.cosh(r)
    sc = sinhc(r)
    return ch + sc * vx, sc * vy, ch - sc * vx


def tau_field(params: FieldParams, spec: BasisSpec | None, points):
    """Noise scaling tau(s) giving sigma(s) as the marginal standard deviation.

    tau = sigma * sqrt(4 pi Gamma(2 beta) / Gamma(2 beta - 1))
        * kappa^(2 beta - 1) * det(H)^(1/4).
    det(H) is identically one under the H(v) parameterization but is
    evaluated anyway so imported anisotropy fields would still work.
    """
    beta = params.beta
    if beta <= 0.5:
        raise ValueError(f"beta = {beta:g} must exceed 1/2 for a finite variance")
    kappa, sigma, vx, vy = field_values(params, spec, points)
    h11, h12, h22 = h_from_v(vx, vy)
    det = h11 * h22 - h12 * h12
    const = np.sqrt(4.0 * np.pi) * np.exp(0.5 * (gammaln(2.0 * beta) - gammaln(2.0 * beta - 1.0)))
    return sigma * const * kappa ** (2.0 * beta - 1.0) * det**0.25


def sigma0_from_tau0(tau0, kappa0, nu, det_h0=1.0):
    """Stationary marginal standard deviation implied by tau0."""
    beta = (nu + 1.0) / 2.0
    lg = 0.5 * (gammaln(2.0 * beta - 1.0) - gammaln(2.0 * beta))
    return np.exp(lg) / np.sqrt(4.0 * np.pi) * tau0 / (kappa0 ** (2.0 * beta - 1.0) * det_h0**0.25)


def tau0_from_sigma0(sigma0, kappa0, nu, det_h0=1.0):
    beta = (nu + 1.0) / 2.0
    lg = 0.5 * (gammaln(2.0 * beta) - gammaln(2.0 * beta - 1.0))
    return sigma0 * np.sqrt(4.0 * np.pi) * np.exp(lg) * kappa0 ** (2.0 * beta - 1.0) * det_h0**0.25


def interpretable(kappa, vx, vy, nu):
    """Map (kappa, v) to range rho, axis ratio a and orientation psi.

    rho is the geometric mean of the ranges along the principal axes,
    a >= 1 their ratio, and psi in (-pi/2, pi/2] the angle of the
    long axis with the x-axis.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    vx = np.asarray(vx, dtype=np.float64)
    vy = np.asarray(vy, dtype=np.float64)
    r = np.hypot(vx, vy)
    rho = np.sqrt(8.0 * nu) / kappa
    a = np.exp(r)
    psi = 0.5 * np.arctan2(vy, vx)
    # atan2 returns (-pi, pi]; halving gives (-pi/2, pi/2] already, but the
    # branch value at exactly -pi/2 folds to +pi/2 by convention.
    psi = np.where(psi <= -np.pi / 2.0, psi + np.pi, psi)
    if rho.ndim == 0:
        return float(rho), float(a), float(psi)
    return rho, a, psi


def from_interpretable(rho, a, psi, nu):
    """Inverse of :func:`interpretable`; requires a >= 1 and rho > 0."""
    rho = np.asarray(rho, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if np.any(rho <= 0.0):
        raise ValueError("rho must be positive")
    if np.any(a < 1.0):
        raise ValueError("axis ratio a must be >= 1")
    kappa = np.sqrt(8.0 * nu) / rho
    r = np.log(a)
    vx = r * np.cos(2.0 * psi)
    vy = r * np.sin(2.0 * psi)
    if kappa.ndim == 0:
        return float(kappa), float(vx), float(vy)
    return kappa, vx, vy
