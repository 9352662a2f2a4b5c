"""Posterior prediction at new locations and proper scoring rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from .inference import ModelState, ObservationSet, conditional_moments
from .mesh import projector

__all__ = [
    "Prediction",
    "predict",
    "write_prediction_csv",
    "crps_gaussian",
    "score_set",
]

_SOLVE_BLOCK = 256


@dataclass
class Prediction:
    locations: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    scale: str  # "latent" or "observation"


def predict(
    state: ModelState,
    obs: ObservationSet,
    params,
    sigma_n2,
    locations,
    design=None,
    scale: str = "latent",
    replicate=None,
) -> Prediction:
    """Plug-in predictive mean and sd of the field at new locations.

    The mean is S_P mu_C and the sd the square root of diag(S_P Q_C^{-1}
    S_P^T), computed by solving against blocks of columns of S_P^T so the
    dense inverse is never formed.  ``scale="observation"`` adds the noise
    variance sigma_N^2.  Locations must fall inside the (extended) mesh.
    """
    if scale not in ("latent", "observation"):
        raise ValueError(f"scale must be 'latent' or 'observation', got {scale!r}")
    locations = np.atleast_2d(np.asarray(locations, dtype=np.float64))
    frac, conds, p_fix = conditional_moments(state, obs, params, sigma_n2)
    if replicate is None:
        if len(conds) != 1:
            ids = [c.replicate for c in conds]
            raise ValueError(f"data has replicates {ids}; pass replicate=...")
        cond = conds[0]
    else:
        match = [c for c in conds if c.replicate == replicate]
        if not match:
            raise ValueError(f"no replicate {replicate!r} in the observations")
        cond = match[0]
    if p_fix and (design is None or np.atleast_2d(design).shape != (len(locations), p_fix)):
        raise ValueError(f"model has {p_fix} fixed effects; design must be (n_new, {p_fix})")

    A_p = projector(state.mesh, locations).to_scipy()
    S_p = A_p @ frac.P_R.to_scipy()
    if p_fix:
        S_p = sp.hstack([S_p, sp.csc_matrix(np.atleast_2d(design))], format="csc")
    S_p = S_p.tocsr()
    mean = S_p @ cond.mu
    var = np.empty(len(locations))
    St = S_p.T.tocsc()
    for lo in range(0, len(locations), _SOLVE_BLOCK):
        hi = min(lo + _SOLVE_BLOCK, len(locations))
        block = np.asarray(St[:, lo:hi].todense())
        V = cond.factor.solve(block)
        var[lo:hi] = np.einsum("ij,ij->j", block, V)
    if scale == "observation":
        var = var + sigma_n2
    return Prediction(locations, mean, np.sqrt(np.maximum(var, 0.0)), scale)


def write_prediction_csv(path, pred: Prediction):
    with open(path, "w") as fh:
        fh.write("x,y,mean,sd,scale\n")
        for (x, y), m, s in zip(pred.locations, pred.mean, pred.sd):
            fh.write(f"{x:.17g},{y:.17g},{m:.17g},{s:.17g},{pred.scale}\n")


def crps_gaussian(y, mean, sd):
    """CRPS of a N(mean, sd^2) forecast at outcome y (closed form).

    sd may be zero, in which case the CRPS is the absolute error.
    Vectorizes over broadcastable inputs.
    """
    y = np.asarray(y, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    if np.any(sd < 0):
        raise ValueError("sd must be nonnegative")
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, (y - mean) / np.where(sd > 0, sd, 1.0), 0.0)
    phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    Phi = 0.5 * (1.0 + erf(z / np.sqrt(2.0)))
    out = sd * (z * (2.0 * Phi - 1.0) + 2.0 * phi - 1.0 / np.sqrt(np.pi))
    return np.where(sd > 0, out, np.abs(y - mean))


def score_set(y, pred: Prediction):
    """Mean scores of a prediction against held-out values."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != pred.mean.shape:
        raise ValueError("held-out values must match the prediction length")
    return {
        "rmse": float(np.sqrt(np.mean((y - pred.mean) ** 2))),
        "crps": float(np.mean(crps_gaussian(y, pred.mean, pred.sd))),
    }
