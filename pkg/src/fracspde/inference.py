"""Penalized log-posterior, reverse-mode gradients, and MAP estimation.

The latent weights and any fixed effects are integrated out analytically,
leaving a marginal posterior over the covariance parameters.  Writing
S = [A P_R, X], Q_z = blockdiag(Qtilde, tau_beta I) and, per replicate r,

    Q_C,r = Q_z + S_r^T S_r / sigma_N^2,
    mu_r  = Q_C,r^{-1} S_r^T y_r / sigma_N^2,

each replicate contributes

    1/2 log|Q_z| - (n_r/2) log(2 pi sigma_N^2) - 1/2 log|Q_C,r|
    - 1/2 mu_r^T Q_z mu_r - 1/2 ||y_r - S_r mu_r||^2 / sigma_N^2

to the log-likelihood, and the priors (with change-of-variables terms for
the unconstrained parameterization) complete the objective.  The whole
evaluation is recorded on a fresh tape per call, so factorizations are
shared between the forward pass and the adjoint sweep and no parameter
cache can go stale.

Unconstrained parameter vector layout (model-class dependent):

    [log kappa0, log sigma0, vx0, vy0, (u_nu), log sigma_N^2,
     (alpha_kappa..., alpha_sigma..., alpha_vx..., alpha_vy...)]

with nu = nu_max * sigmoid(u_nu), kept away from integers by a clamp of
half-width 1e-3 so the fractional operator path stays differentiable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln as _gammaln_f

from . import ratapprox, sparse_core as sc
from .autodiff import Tape
from .fem import FemAssembly, assemble_fem
from .fields import FieldParams, basis_eval, field_values, h_from_v, tau_field
from .mesh import projector
from .priors import PriorConfig, SpectralPenalty, log_prior_nonstationary, log_prior_stationary

__all__ = [
    "MODEL_CLASSES",
    "ObservationSet",
    "ModelState",
    "FitResult",
    "clamp_nu",
    "build_operator",
    "log_posterior",
    "log_posterior_grad",
    "conditional_moments",
    "fit_map",
    "write_trace",
]

MODEL_CLASSES = ("nf-s", "nf-ns", "f-s", "f-ns")

LOG2PI = float(np.log(2.0 * np.pi))
NU_CLAMP = 1e-3


class ObservationSet:
    """Observed values at mesh locations, optionally across replicates.

    ``replicate`` groups rows into independent realizations sharing the
    covariance parameters; ``design`` is an optional fixed-effects matrix
    whose columns are shared across replicates.
    """

    def __init__(self, locations, values, replicate=None, design=None):
        self.locations = np.atleast_2d(np.asarray(locations, dtype=np.float64))
        self.values = np.asarray(values, dtype=np.float64).ravel()
        n = len(self.values)
        if self.locations.shape != (n, 2):
            raise ValueError("locations must be (n, 2) matching values")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("observation values must be finite")
        if replicate is None:
            replicate = np.zeros(n, dtype=np.int64)
        self.replicate = np.asarray(replicate, dtype=np.int64).ravel()
        if len(self.replicate) != n:
            raise ValueError("replicate ids must match values in length")
        self.design = None if design is None else np.atleast_2d(np.asarray(design, dtype=np.float64))
        if self.design is not None and self.design.shape[0] != n:
            raise ValueError("design matrix rows must match values")
        self._blocks = {}

    @property
    def n(self):
        return len(self.values)

    @property
    def p(self):
        return 0 if self.design is None else self.design.shape[1]

    def blocks(self, mesh):
        """Per-replicate (id, projector, y, design rows); cached per mesh."""
        key = id(mesh)
        if key not in self._blocks:
            out = []
            for rep in np.unique(self.replicate):
                idx = np.flatnonzero(self.replicate == rep)
                A = projector(mesh, self.locations[idx])
                Xr = None if self.design is None else self.design[idx]
                out.append((int(rep), A, self.values[idx], Xr))
            self._blocks[key] = out
        return self._blocks[key]


def clamp_nu(nu, nu_max, half=NU_CLAMP):
    """Push nu out of the +-half window around any integer >= 1."""
    r = round(nu)
    if r >= 1 and abs(nu - r) < half:
        nu = r + half if nu >= r else r - half
    return min(max(nu, half), nu_max - half)


@dataclass(frozen=True)
class _Layout:
    i_logk: int
    i_logs: int
    i_vx: int
    i_vy: int
    i_unu: int | None
    i_logsn2: int
    alpha_slices: tuple  # four slices or empty
    size: int


class ModelState:
    """Everything fixed during one fit: mesh, model class, priors, penalty.

    ``model_class`` is one of nf-s / nf-ns / f-s / f-ns: "nf" fixes the
    smoothness (nu_fixed, default 1, exact integer operator path) while
    "f" estimates it; "-ns" adds basis coefficients for all four fields.
    """

    def __init__(
        self,
        mesh,
        model_class: str,
        priors: PriorConfig,
        basis=None,
        penalty: SpectralPenalty | None = None,
        k: int = 2,
        eps: float = 1e-4,
        nu_fixed: float = 1.0,
    ):
        if model_class not in MODEL_CLASSES:
            raise ValueError(f"model_class must be one of {MODEL_CLASSES}, got {model_class!r}")
        self.mesh = mesh
        self.assembly = FemAssembly(mesh)
        self.model_class = model_class
        self.priors = priors
        self.basis = basis
        self.penalty = penalty
        self.k = int(k)
        self.eps = float(eps)
        self.nu_fixed = float(nu_fixed)
        if self.nonstationary:
            if basis is None or penalty is None:
                raise ValueError(f"{model_class} needs a basis and a calibrated penalty")
            self._Fc = basis_eval(basis, mesh.centroids)
        else:
            self._Fc = None
        if not self.fractional and self.nu_fixed != round(self.nu_fixed):
            raise ValueError("non-fractional classes need an integer nu_fixed")

        n = self.assembly.g_pattern.nnz
        nv = mesh.n_vertices
        # scatter of a diagonal vector into the stiffness value array
        self._diag_scatter = sp.csr_matrix(
            (np.ones(nv), (self.assembly.diag_pos, np.arange(nv))), shape=(n, nv)
        )
        self._diag_scatter_t = self._diag_scatter.T.tocsr()

        m = basis.size if self.nonstationary else 0
        i = 0
        i_logk, i_logs, i_vx, i_vy = 0, 1, 2, 3
        i = 4
        i_unu = None
        if self.fractional:
            i_unu = i
            i += 1
        i_logsn2 = i
        i += 1
        if m:
            slices = tuple(slice(i + j * m, i + (j + 1) * m) for j in range(4))
            i += 4 * m
        else:
            slices = ()
        self.layout = _Layout(i_logk, i_logs, i_vx, i_vy, i_unu, i_logsn2, slices, i)

    @property
    def fractional(self):
        return self.model_class.startswith("f")

    @property
    def nonstationary(self):
        return self.model_class.endswith("-ns")

    @property
    def n_params(self):
        return self.layout.size

    # -- packing -----------------------------------------------------------

    def pack(self, params: FieldParams, sigma_n2) -> np.ndarray:
        u = np.zeros(self.layout.size)
        P = self.layout
        u[P.i_logk] = params.log_kappa0
        u[P.i_logs] = params.log_sigma0
        u[P.i_vx] = params.vx0
        u[P.i_vy] = params.vy0
        if P.i_unu is not None:
            x = params.nu / self.priors.nu_max
            if not 0.0 < x < 1.0:
                raise ValueError(f"nu = {params.nu:g} outside (0, {self.priors.nu_max:g})")
            u[P.i_unu] = np.log(x / (1.0 - x))
        u[P.i_logsn2] = np.log(sigma_n2)
        for slc, alpha in zip(
            P.alpha_slices,
            (params.alpha_kappa, params.alpha_sigma, params.alpha_vx, params.alpha_vy),
        ):
            u[slc] = alpha if len(alpha) else 0.0
        return u

    def unpack(self, u) -> tuple[FieldParams, float]:
        P = self.layout
        u = np.asarray(u, dtype=np.float64)
        if P.i_unu is not None:
            nu = clamp_nu(
                self.priors.nu_max / (1.0 + np.exp(-u[P.i_unu])), self.priors.nu_max
            )
        else:
            nu = self.nu_fixed
        alphas = [u[s].copy() for s in P.alpha_slices] if P.alpha_slices else [np.zeros(0)] * 4
        params = FieldParams(
            float(u[P.i_logk]),
            float(u[P.i_logs]),
            float(u[P.i_vx]),
            float(u[P.i_vy]),
            float(nu),
            *alphas,
        )
        return params, float(np.exp(u[P.i_logsn2]))

    def pack_interpretable(self, rho0, sigma0, a0, psi0, nu0, sigma_n2) -> np.ndarray:
        """Initial vector from interpretable stationary parameters."""
        from .fields import from_interpretable

        nu_eff = nu0 if self.fractional else self.nu_fixed
        kappa0, vx0, vy0 = from_interpretable(rho0, a0, psi0, nu_eff)
        params = FieldParams(np.log(kappa0), np.log(sigma0), vx0, vy0, nu_eff)
        return self.pack(params, sigma_n2)

    # -- numpy-path model assembly ----------------------------------------

    def build_operator(self, params: FieldParams):
        """(FemMatrices, FracOperator) at fixed parameter values."""
        return build_operator(self.assembly, params, self.basis, self.k, self.eps)


def build_operator(assembly: FemAssembly, params: FieldParams, basis=None, k=2, eps=1e-4):
    """(FemMatrices, FracOperator) at fixed parameter values (numpy path)."""
    cent = assembly.mesh.centroids
    kappa_c, _, vx_c, vy_c = field_values(params, basis, cent)
    tau_c = tau_field(params, basis, cent)
    h11, h12, h22 = h_from_v(vx_c, vy_c)
    fm = assemble_fem(assembly, kappa_c**2, tau_c**2, h11, h12, h22)
    coeffs = ratapprox.cheb_pade(params.beta, k, eps)
    return fm, ratapprox.assemble_frac(fm, kappa_c, coeffs)


# -- tape construction -----------------------------------------------------


def _tape_sp_poly(t, B, coefs_list):
    """sum_j coefs[j] * B^(p-j) on tape, Horner; coefs are scalar Vars."""
    n = t._val(B).n
    ones = np.ones(n)
    S = t.sp_diag(t.mul(coefs_list[0], ones))
    for cj in coefs_list[1:]:
        S = t.sp_add(t.sp_matmul(S, B), t.sp_diag(t.mul(cj, ones)))
    return S


def _build_tape(state: ModelState, obs: ObservationSet | None, u_np):
    t = Tape()
    u = t.var(np.asarray(u_np, dtype=np.float64))
    P = state.layout
    cfg = state.priors
    asm = state.assembly
    ntri = state.mesh.n_triangles
    ones_c = np.ones(ntri)

    logk0 = t.getitem(u, P.i_logk)
    logs0 = t.getitem(u, P.i_logs)
    vx0 = t.getitem(u, P.i_vx)
    vy0 = t.getitem(u, P.i_vy)
    log_sn2 = t.getitem(u, P.i_logsn2)

    if state.fractional:
        unu = t.getitem(u, P.i_unu)
        nu = t.mul(t.sigmoid(unu), cfg.nu_max)
        raw = float(nu.value)
        clamped = clamp_nu(raw, cfg.nu_max)
        if clamped != raw:
            nu = t.add(nu, clamped - raw)
        beta = t.mul(t.add(nu, 1.0), 0.5)
        nu_val = clamped
    else:
        nu = None
        nu_val = state.nu_fixed
        beta = 0.5 * (nu_val + 1.0)

    # -- coefficient fields at centroids
    if state.nonstationary:
        Fc = state._Fc
        a_k = t.getitem(u, P.alpha_slices[0])
        a_s = t.getitem(u, P.alpha_slices[1])
        a_vx = t.getitem(u, P.alpha_slices[2])
        a_vy = t.getitem(u, P.alpha_slices[3])
        log_kappa_c = t.add(logk0, t.matmul(Fc, a_k))
        log_sigma_c = t.add(logs0, t.matmul(Fc, a_s))
        vx_c = t.add(vx0, t.matmul(Fc, a_vx))
        vy_c = t.add(vy0, t.matmul(Fc, a_vy))
    else:
        a_k = a_s = a_vx = a_vy = None
        log_kappa_c = t.mul(logk0, ones_c)
        log_sigma_c = t.mul(logs0, ones_c)
        vx_c = t.mul(vx0, ones_c)
        vy_c = t.mul(vy0, ones_c)

    s2 = t.add(t.mul(vx_c, vx_c), t.mul(vy_c, vy_c))
    ch = t.cosh_sqrt(s2)
    sc_ = t.sinhc_sqrt(s2)
    h11 = t.add(ch, t.mul(sc_, vx_c))
    h12 = t.mul(sc_, vy_c)
    h22 = t.sub(ch, t.mul(sc_, vx_c))
    det_h = t.sub(t.mul(h11, h22), t.mul(h12, h12))

    # tau(s) = sigma sqrt(4 pi G(2b)/G(2b-1)) kappa^(2b-1) det(H)^(1/4)
    if state.fractional:
        g = t.mul(
            t.sub(t.gammaln(t.mul(beta, 2.0)), t.gammaln(t.sub(t.mul(beta, 2.0), 1.0))),
            0.5,
        )
        two_bm1 = t.sub(t.mul(beta, 2.0), 1.0)
        log_tau_c = t.add(
            t.add(log_sigma_c, t.add(g, 0.5 * np.log(4.0 * np.pi))),
            t.add(t.mul(log_kappa_c, two_bm1), t.mul(t.log(det_h), 0.25)),
        )
    else:
        g_const = 0.5 * float(
            np.log(4.0 * np.pi) + _gammaln_f(2.0 * beta) - _gammaln_f(2.0 * beta - 1.0)
        )
        log_tau_c = t.add(
            t.add(log_sigma_c, g_const),
            t.add(t.mul(log_kappa_c, 2.0 * beta - 1.0), t.mul(t.log(det_h), 0.25)),
        )

    kappa2_c = t.exp(t.mul(log_kappa_c, 2.0))
    tau2_c = t.exp(t.mul(log_tau_c, 2.0))

    # -- FEM matrices through the constant assembly maps
    ck2 = t.const_spmatvec(asm.lump, kappa2_c, asm.lump_t)
    ct2 = t.const_spmatvec(asm.lump, tau2_c, asm.lump_t)
    gv = t.add(
        t.add(
            t.const_spmatvec(asm.w11, h11, asm.w11_t),
            t.const_spmatvec(asm.w12, h12, asm.w12_t),
        ),
        t.const_spmatvec(asm.w22, h22, asm.w22_t),
    )
    lv = t.add(gv, t.const_spmatvec(state._diag_scatter, ck2, state._diag_scatter_t))
    L = t.sp_build(asm.g_pattern, lv, symmetric=True)

    c_diag = asm.mass_diag(ones_c)
    X = t.sp_row_scale(1.0 / c_diag, L)

    if state.fractional:
        log_kmin = t.vmin(log_kappa_c)
        B = t.sp_scale(X, t.exp(t.mul(log_kmin, -2.0)))
        num, den, kb, _sup = ratapprox.cheb_pade_tape(t, beta, state.k, state.eps)
        den_list = [t.getitem(den, j) for j in range(state.k + 2)]
        num_list = [t.getitem(num, j) for j in range(state.k + 1)]
        P_L = _tape_sp_poly(t, B, den_list)
        for _ in range(kb - 1):
            P_L = t.sp_matmul(P_L, B)
        scale = t.exp(t.mul(t.mul(beta, -2.0), log_kmin))
        P_R = t.sp_scale(_tape_sp_poly(t, B, num_list), scale)
    else:
        P_L = X
        for _ in range(int(round(beta)) - 1):
            P_L = t.sp_matmul(P_L, X)
        P_R = None  # identity

    mid = t.div(c_diag * c_diag, ct2)
    Qt = t.sp_matmul(t.sp_transpose(P_L), t.sp_row_scale(mid, P_L))

    # -- likelihood over replicates
    lp = t.constant(0.0)
    blocks = [] if obs is None else obs.blocks(state.mesh)
    blocks = [b for b in blocks if len(b[2])]
    p_fix = 0 if (obs is None or obs.design is None) else obs.design.shape[1]
    if blocks:
        if p_fix:
            tb = sc.diag_matrix(np.full(p_fix, cfg.tau_beta))
            Qz = t.sp_block_diag([Qt, t.constant(tb)])
        else:
            Qz = Qt
        half_logdet_qz = t.mul(t.sp_logdet(Qt), 0.5)
        inv_sn2 = t.exp(t.sub(0.0, log_sn2))
        for _rep, A, y, Xr in blocks:
            if P_R is None:
                Sw = t.constant(A)
            else:
                Sw = t.sp_matmul(t.constant(A), P_R)
            if p_fix:
                S = t.sp_hstack([Sw, t.constant(sc.from_dense(Xr, keep_zeros=True))])
            else:
                S = Sw
            St = t.sp_transpose(S)
            StS = t.sp_matmul(St, S)
            Qc = t.sp_add(Qz, t.sp_scale(StS, inv_sn2))
            b = t.mul(t.sp_mat_dense(St, y), inv_sn2)
            mu = t.sp_solve(Qc, b)
            resid = t.sub(y, t.sp_mat_dense(S, mu))
            n_r = len(y)
            lp = t.add(
                lp,
                t.sub(
                    t.add(half_logdet_qz, 0.5 * p_fix * np.log(cfg.tau_beta)),
                    t.add(
                        t.add(
                            t.mul(t.sp_logdet(Qc), 0.5),
                            t.mul(t.add(log_sn2, LOG2PI), 0.5 * n_r),
                        ),
                        t.add(
                            t.mul(t.dot(mu, t.sp_mat_dense(Qz, mu)), 0.5),
                            t.mul(t.mul(t.dot(resid, resid), inv_sn2), 0.5),
                        ),
                    ),
                ),
            )

    # -- priors on natural scales plus change-of-variables terms
    if state.fractional:
        log_rho0 = t.sub(t.mul(t.add(t.log(nu), np.log(8.0)), 0.5), logk0)
    else:
        log_rho0 = t.sub(0.5 * np.log(8.0 * nu_val), logk0)
    rho0 = t.exp(log_rho0)
    sigma0 = t.exp(logs0)
    sigma_n = t.exp(t.mul(log_sn2, 0.5))
    nu_arg = nu if state.fractional else nu_val
    lp = t.add(
        lp,
        log_prior_stationary(
            rho0, sigma0, vx0, vy0, nu_arg, sigma_n, cfg, include_nu=state.fractional
        ),
    )
    jac = t.add(t.add(log_rho0, logs0), t.sub(t.mul(log_sn2, 0.5), np.log(2.0)))
    if state.fractional:
        jac = t.add(jac, t.log(t.mul(nu, t.sub(1.0, t.div(nu, cfg.nu_max)))))
    lp = t.add(lp, jac)
    if state.nonstationary:
        lp = t.add(lp, log_prior_nonstationary(a_k, a_s, a_vx, a_vy, state.penalty))
    return t, lp, u


def log_posterior(state: ModelState, obs, u) -> float:
    _, root, _ = _build_tape(state, obs, u)
    return float(root.value)


def log_posterior_grad(state: ModelState, obs, u):
    t, root, uv = _build_tape(state, obs, u)
    g = t.gradient(root, [uv])[0]
    return float(root.value), g


# -- conditional moments and fitting --------------------------------------


@dataclass
class Conditional:
    """Per-replicate posterior moments of the augmented weight vector."""

    replicate: int
    mu: np.ndarray
    factor: sc.CholFactor
    n_obs: int


def conditional_moments(state: ModelState, obs: ObservationSet, params, sigma_n2):
    """Gaussian conditional of z = (weights, fixed effects) given data.

    Returns (FracOperator, list of Conditional, p_fix).
    """
    _, frac = state.build_operator(params)
    p_fix = obs.p
    if p_fix:
        Qz = sc.block_diag(
            [frac.Qtilde, sc.diag_matrix(np.full(p_fix, state.priors.tau_beta))]
        )
    else:
        Qz = frac.Qtilde
    out = []
    for rep, A, y, Xr in obs.blocks(state.mesh):
        S = A.to_scipy() @ frac.P_R.to_scipy()
        if p_fix:
            S = sp.hstack([S, sp.csc_matrix(Xr)], format="csc")
        StS = sc.from_scipy((S.T @ S).tocsc(), symmetric=True)
        Qc = sc.add(Qz, StS, 1.0, 1.0 / sigma_n2)
        fac = sc.cholesky(Qc)
        mu = fac.solve(S.T @ y / sigma_n2)
        out.append(Conditional(rep, mu, fac, len(y)))
    return frac, out, p_fix


@dataclass
class FitResult:
    u: np.ndarray
    params: FieldParams
    sigma_n2: float
    logpost: float
    trace: np.ndarray  # columns: iteration, logpost, grad_norm, wall_ms
    converged: bool
    n_iter: int
    wall_s: float


def fit_map(
    state: ModelState,
    obs: ObservationSet | None,
    u0,
    lr: float = 0.01,
    max_iter: int = 2000,
    tol: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    adam_eps: float = 1e-8,
) -> FitResult:
    """Adam ascent on the log-posterior; returns the best-seen parameters.

    Stops when the objective changes by less than ``tol`` times its current
    magnitude between successive iterations, or at ``max_iter``.
    """
    u = np.array(u0, dtype=np.float64)
    if u.shape != (state.n_params,):
        raise ValueError(f"u0 has shape {u.shape}, expected ({state.n_params},)")
    m = np.zeros_like(u)
    v = np.zeros_like(u)
    best_lp = -np.inf
    best_u = u.copy()
    prev = None
    converged = False
    rows = []
    t_start = time.perf_counter()
    it = 0
    for it in range(1, max_iter + 1):
        t0 = time.perf_counter()
        lp, g = log_posterior_grad(state, obs, u)
        if not np.isfinite(lp):
            if it == 1:
                raise ValueError("log-posterior is not finite at the initial parameters")
            break
        if lp > best_lp:
            best_lp = lp
            best_u = u.copy()
        rows.append((it, lp, float(np.linalg.norm(g)), (time.perf_counter() - t0) * 1e3))
        if prev is not None and abs(lp - prev) < tol * abs(lp):
            converged = True
            break
        prev = lp
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**it)
        vhat = v / (1.0 - beta2**it)
        u = u + lr * mhat / (np.sqrt(vhat) + adam_eps)
    params, sigma_n2 = state.unpack(best_u)
    return FitResult(
        best_u,
        params,
        sigma_n2,
        best_lp,
        np.array(rows),
        converged,
        it,
        time.perf_counter() - t_start,
    )


def write_trace(path, trace):
    with open(path, "w") as fh:
        fh.write("iteration,logpost,grad_norm,wall_ms\n")
        for row in np.atleast_2d(trace):
            if len(row) == 0:
                continue
            fh.write(f"{int(row[0])},{row[1]:.17g},{row[2]:.17g},{row[3]:.6g}\n")
