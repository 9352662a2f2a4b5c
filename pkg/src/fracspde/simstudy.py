"""Synthetic-data generators and the candidate-model comparison study.

Datasets are drawn from a stationary or non-stationary fractional generator
on a shared mesh; each candidate model class is fitted to nested observation
subsets of every replicate and scored on a regular prediction grid against
the noise-free truth.  Cells (generator, candidate, replicate) are
independent, carry seeds derived from the study seed, and persist their
results to disk so an interrupted study resumes where it stopped.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .fem import FemAssembly
from .fields import BasisSpec, FieldParams, interpretable
from .inference import ModelState, ObservationSet, build_operator, fit_map
from .mesh import build_rect_mesh, projector
from .predict_score import predict, score_set
from .priors import SpectralPenalty, calibrate_penalty, derive_hyper, q_ns_diagonal
from .ratapprox import sample_weights

__all__ = [
    "GeneratorSpec",
    "CandidateSpec",
    "StudyConfig",
    "Dataset",
    "desk_config",
    "basis_for",
    "generate_dataset",
    "run_study",
    "estimate_bias",
    "write_results_csv",
    "write_bias_csv",
]

BIAS_PARAMS = ("nu", "rho0", "a0", "psi0", "sigma0", "sigma_n")


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str  # "stationary" | "non-stationary"
    nu: float = 0.5
    rho0: float = 10.0
    sigma0: float = 1.0
    n_basis: int = 8  # anisotropy basis size (non-stationary only)
    c_ns_v: float = 10.0  # penalty threshold used to scale the drawn coefficients

    def __post_init__(self):
        if self.kind not in ("stationary", "non-stationary"):
            raise ValueError(f"unknown generator kind {self.kind!r}")

    @property
    def label(self):
        return self.kind


@dataclass(frozen=True)
class CandidateSpec:
    model_class: str  # nf-s | nf-ns | f-s | f-ns
    n_basis: int = 8  # 8 or 16 (16 rounds down to the nearest full tensor set, 15)
    c_ns: float = 10.0

    def __post_init__(self):
        if self.n_basis not in (8, 16):
            raise ValueError(f"basis count must be 8 or 16, got {self.n_basis}")
        if self.c_ns not in (2.0, 5.0, 10.0, 2, 5, 10):
            raise ValueError(f"C_NS must be one of 2, 5, 10, got {self.c_ns}")

    @property
    def nonstationary(self):
        return self.model_class.endswith("-ns")

    @property
    def label(self):
        base = self.model_class.upper()
        if self.nonstationary:
            return f"{base}-B{self.n_basis}-C{int(self.c_ns)}"
        return base


@dataclass(frozen=True)
class StudyConfig:
    generators: tuple = (GeneratorSpec("stationary"), GeneratorSpec("non-stationary"))
    candidates: tuple = (
        CandidateSpec("nf-s"),
        CandidateSpec("nf-ns"),
        CandidateSpec("f-s"),
        CandidateSpec("f-ns"),
    )
    n_replicates: int = 5
    n_obs_list: tuple = (125, 500)
    n_locations: int = 1000
    noise_var: float = 0.1
    interest_rect: tuple = (0.0, 20.0, 0.0, 20.0)
    extension_width: float = 20.0
    edge_length: float = 1.6
    grid_shape: tuple = (50, 50)
    k_rational: int = 1
    eps: float = 1e-4
    max_iter: int = 500
    c_a: float = 4.0
    c_nu: float = 1.0
    c_nu_hpd: float = 1.8
    nu_max: float = 2.0
    seed: int = 20260823

    def __post_init__(self):
        n_max = max(self.n_obs_list)
        if n_max > self.n_locations:
            raise ValueError("observation counts cannot exceed the location count")
        if sorted(self.n_obs_list) != list(self.n_obs_list):
            raise ValueError("observation counts must be increasing (nested subsets)")


def desk_config(**overrides) -> StudyConfig:
    """Desk-scale defaults: 5 replicates, ~1.5k vertices, 125/500 observations."""
    return StudyConfig(**overrides)


def basis_for(n_basis: int, rect) -> BasisSpec:
    """Tensor cosine basis with roughly the requested number of functions.

    8 -> M = N = 2 (exactly 8); 16 -> M = N = 3 (15 functions; the tensor
    construction minus the constant cannot produce exactly 16).
    """
    m = {8: 2, 16: 3}[n_basis]
    return BasisSpec(m, m, rect)


# -- data generation -------------------------------------------------------


@dataclass
class Dataset:
    """One replicate: 1000 sampled locations with noisy values, plus truth."""

    locations: np.ndarray
    values: np.ndarray
    grid: np.ndarray
    truth: np.ndarray
    weights: np.ndarray
    params: FieldParams
    sigma_n2: float

    def subset(self, n: int) -> ObservationSet:
        """First n observations in sampled order (subsets are nested)."""
        return ObservationSet(self.locations[:n], self.values[:n])


def generator_params(config: StudyConfig, gen: GeneratorSpec) -> FieldParams:
    """True field parameters; anisotropy coefficients are drawn once from the
    calibrated spectral prior under a seed fixed by (study seed, generator)."""
    kappa0 = np.sqrt(8.0 * gen.nu) / gen.rho0
    if gen.kind == "stationary":
        return FieldParams(np.log(kappa0), np.log(gen.sigma0), 0.0, 0.0, gen.nu)
    gen_idx = config.generators.index(gen)
    spec = basis_for(gen.n_basis, config.interest_rect)
    ss = np.random.SeedSequence(config.seed, spawn_key=(1, gen_idx))
    rng = np.random.default_rng(ss)
    tau_v = calibrate_penalty("v", gen.c_ns_v, spec, rng)
    sd = 1.0 / np.sqrt(tau_v * q_ns_diagonal(spec))
    alpha_vx = rng.standard_normal(spec.size) * sd
    alpha_vy = rng.standard_normal(spec.size) * sd
    return FieldParams(
        np.log(kappa0), np.log(gen.sigma0), 0.0, 0.0, gen.nu,
        alpha_vx=alpha_vx, alpha_vy=alpha_vy,
    )


def grid_locations(config: StudyConfig) -> np.ndarray:
    x0, x1, y0, y1 = config.interest_rect
    gx = np.linspace(x0, x1, config.grid_shape[0])
    gy = np.linspace(y0, y1, config.grid_shape[1])
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel()])


def generate_dataset(config: StudyConfig, gen: GeneratorSpec, mesh, replicate: int,
                     frac=None) -> Dataset:
    """Draw one replicate: field weights, 1000 uniform locations, noise.

    Deterministic per (config.seed, generator, replicate); the draw order
    (weights, locations, noise) is fixed so subsets stay comparable.
    """
    params = generator_params(config, gen)
    if frac is None:
        spec = None
        if gen.kind == "non-stationary":
            spec = basis_for(gen.n_basis, config.interest_rect)
        _, frac = build_operator(
            FemAssembly(mesh), params, spec, config.k_rational, config.eps
        )
    gen_idx = config.generators.index(gen)
    rng = np.random.default_rng(
        np.random.SeedSequence(config.seed, spawn_key=(3, gen_idx, replicate))
    )
    w = sample_weights(frac, rng)
    x0, x1, y0, y1 = config.interest_rect
    locs = np.column_stack([
        rng.uniform(x0, x1, config.n_locations),
        rng.uniform(y0, y1, config.n_locations),
    ])
    y = projector(mesh, locs).matvec(w) + np.sqrt(config.noise_var) * rng.standard_normal(
        config.n_locations
    )
    grid = grid_locations(config)
    truth = projector(mesh, grid).matvec(w)
    return Dataset(locs, y, grid, truth, w, params, config.noise_var)


# -- study orchestration ---------------------------------------------------

_SHARED = {}


def _shared(config: StudyConfig):
    """Per-process cache of mesh, generator operators, and calibrations."""
    got = _SHARED.get(config)
    if got is not None:
        return got
    mesh = build_rect_mesh(config.interest_rect, config.extension_width, config.edge_length)
    assembly = FemAssembly(mesh)
    gen_ops = {}
    for gen in config.generators:
        params = generator_params(config, gen)
        spec = None
        if gen.kind == "non-stationary":
            spec = basis_for(gen.n_basis, config.interest_rect)
        _, frac = build_operator(assembly, params, spec, config.k_rational, config.eps)
        gen_ops[gen] = (params, frac)
    calibrations = {}
    for cand in config.candidates:
        if not cand.nonstationary:
            continue
        key = (cand.n_basis, float(cand.c_ns))
        if key in calibrations:
            continue
        spec = basis_for(cand.n_basis, config.interest_rect)
        taus = {}
        for fi, fieldname in enumerate(("rho", "sigma", "v")):
            rng = np.random.default_rng(np.random.SeedSequence(
                config.seed, spawn_key=(2, cand.n_basis, int(cand.c_ns * 100), fi),
            ))
            taus[fieldname] = calibrate_penalty(fieldname, float(cand.c_ns), spec, rng)
        calibrations[key] = SpectralPenalty(
            q_ns_diagonal(spec), taus["rho"], taus["sigma"], taus["v"]
        )
    got = (mesh, assembly, gen_ops, calibrations)
    _SHARED[config] = got
    return got


def _study_priors(config: StudyConfig, gen: GeneratorSpec):
    return derive_hyper(
        c_rho=gen.rho0,
        c_sigma=gen.sigma0,
        c_a=config.c_a,
        c_nu=config.c_nu,
        c_nu_hpd=config.c_nu_hpd,
        nu_max=config.nu_max,
        c_sigma_n=np.sqrt(config.noise_var),
    )


def _init_vector(config, gen, state, rng):
    """Stationary parameters uniform within +-50% of the generator truth;
    non-stationarity (v0 and all basis coefficients) starts at zero."""
    f = lambda: rng.uniform(0.5, 1.5)
    rho0 = gen.rho0 * f()
    sigma0 = gen.sigma0 * f()
    sigma_n2 = config.noise_var * f()
    nu0 = gen.nu * f() if state.fractional else state.nu_fixed
    return state.pack_interpretable(rho0, sigma0, 1.0, 0.0, nu0, sigma_n2)


def _cell_rows(config: StudyConfig, gen_idx: int, cand_idx: int, replicate: int):
    """Fit one (generator, candidate, replicate) cell at every n_obs."""
    gen = config.generators[gen_idx]
    cand = config.candidates[cand_idx]
    mesh, assembly, gen_ops, calibrations = _shared(config)
    _, gen_frac = gen_ops[gen]
    data = generate_dataset(config, gen, mesh, replicate, frac=gen_frac)
    priors = _study_priors(config, gen)
    if cand.nonstationary:
        spec = basis_for(cand.n_basis, config.interest_rect)
        penalty = calibrations[(cand.n_basis, float(cand.c_ns))]
        state = ModelState(mesh, cand.model_class, priors, basis=spec, penalty=penalty,
                           k=config.k_rational, eps=config.eps)
    else:
        state = ModelState(mesh, cand.model_class, priors,
                           k=config.k_rational, eps=config.eps)
    rows = []
    for n_obs in config.n_obs_list:
        rng = np.random.default_rng(np.random.SeedSequence(
            config.seed, spawn_key=(4, gen_idx, cand_idx, replicate, n_obs)
        ))
        row = {
            "generator": gen.label,
            "candidate": cand.label,
            "n_obs": n_obs,
            "replicate": replicate,
        }
        t0 = time.perf_counter()
        try:
            obs = data.subset(n_obs)
            u0 = _init_vector(config, gen, state, rng)
            fit = fit_map(state, obs, u0, max_iter=config.max_iter)
            pred = predict(state, obs, fit.params, fit.sigma_n2, data.grid)
            scores = score_set(data.truth, pred)
            p = fit.params
            rho0, a0, psi0 = interpretable(np.exp(p.log_kappa0), p.vx0, p.vy0, p.nu)
            row.update(
                rmse=scores["rmse"],
                crps=scores["crps"],
                nu=p.nu,
                rho0=rho0,
                a0=a0,
                psi0=float(np.degrees(psi0)),
                sigma0=float(np.exp(p.log_sigma0)),
                sigma_n=float(np.sqrt(fit.sigma_n2)),
                logpost=fit.logpost,
                iterations=fit.n_iter,
                converged=bool(fit.converged),
                runtime_s=time.perf_counter() - t0,
                error="",
            )
        except Exception as exc:  # record, don't kill the study
            row.update(
                rmse=None, crps=None, nu=None, rho0=None, a0=None, psi0=None,
                sigma0=None, sigma_n=None, logpost=None, iterations=None,
                converged=None, runtime_s=time.perf_counter() - t0,
                error=f"{type(exc).__name__}: {exc}",
            )
        rows.append(row)
    return rows


def _cell_path(out_dir, gen, cand, replicate):
    return out_dir / "cells" / f"{gen.label}_{cand.label}_r{replicate}.json"


def run_study(config: StudyConfig, out_dir, resume: bool = True, threads: int = 1):
    """Run every (generator, candidate, replicate) cell and gather results.

    Writes ``results.csv``, ``bias.csv`` and ``manifest.json`` under
    ``out_dir``; per-cell JSON files under ``out_dir/cells`` make the study
    resumable.  With threads > 1 cells run in worker processes (results are
    identical; only wall time changes).
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)
    cells = [
        (gi, ci, r)
        for gi in range(len(config.generators))
        for ci in range(len(config.candidates))
        for r in range(config.n_replicates)
    ]
    todo = []
    for gi, ci, r in cells:
        path = _cell_path(out_dir, config.generators[gi], config.candidates[ci], r)
        if not (resume and path.exists()):
            todo.append((gi, ci, r))

    if threads > 1 and todo:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {
                pool.submit(_cell_rows, config, gi, ci, r): (gi, ci, r)
                for gi, ci, r in todo
            }
            for fut, (gi, ci, r) in futures.items():
                rows = fut.result()
                path = _cell_path(out_dir, config.generators[gi], config.candidates[ci], r)
                path.write_text(json.dumps(rows, indent=1))
    else:
        for gi, ci, r in todo:
            rows = _cell_rows(config, gi, ci, r)
            path = _cell_path(out_dir, config.generators[gi], config.candidates[ci], r)
            path.write_text(json.dumps(rows, indent=1))

    all_rows = []
    for gi, ci, r in cells:
        path = _cell_path(out_dir, config.generators[gi], config.candidates[ci], r)
        all_rows.extend(json.loads(path.read_text()))
    all_rows.sort(key=lambda d: (d["generator"], d["candidate"], d["n_obs"], d["replicate"]))
    write_results_csv(out_dir / "results.csv", all_rows)
    # wall times live in their own file so the result CSVs are reproducible
    # byte for byte under a fixed seed
    with open(out_dir / "timings.csv", "w") as fh:
        fh.write("generator,candidate,n_obs,replicate,runtime_s\n")
        for row in all_rows:
            fh.write(",".join(_fmt(row[c]) for c in
                              ("generator", "candidate", "n_obs", "replicate", "runtime_s")) + "\n")
    write_bias_csv(out_dir / "bias.csv", estimate_bias(all_rows))
    _write_manifest(config, out_dir)
    return all_rows


def _write_manifest(config: StudyConfig, out_dir):
    import numba
    import scipy

    from . import __version__

    mesh, _, gen_ops, calibrations = _shared(config)
    manifest = {
        "config": asdict(config),
        "mesh": {"n_vertices": mesh.n_vertices, "n_triangles": mesh.n_triangles},
        "seed_scheme": "SeedSequence(seed, spawn_key): (1,gen) coefficients, "
        "(2,basis,100*c_ns) calibration, (3,gen,rep) data, (4,gen,cand,rep,n) init",
        "generator_coefficients": {
            gen.label: {
                "alpha_vx": list(params.alpha_vx),
                "alpha_vy": list(params.alpha_vy),
            }
            for gen, (params, _) in gen_ops.items()
            if gen.kind == "non-stationary"
        },
        "calibrated_tau": {
            f"B{nb}-C{int(c)}": {
                "rho": pen.tau_kappa, "sigma": pen.tau_sigma, "v": pen.tau_v,
            }
            for (nb, c), pen in calibrations.items()
        },
        "versions": {
            "fracspde": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


_CSV_COLS = (
    "generator", "candidate", "n_obs", "replicate", "rmse", "crps", "nu",
    "rho0", "a0", "psi0", "sigma0", "sigma_n", "logpost", "iterations",
    "converged", "error",
)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.17g}"
    # free-text fields must not break the CSV shape
    return str(v).replace(",", ";").replace("\n", " ")


def write_results_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(_CSV_COLS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in _CSV_COLS) + "\n")


def read_results_csv(path):
    import csv

    out = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            for key in row:
                if key in ("generator", "candidate", "error"):
                    continue
                if row[key] == "":
                    row[key] = None
                elif key in ("n_obs", "replicate", "iterations"):
                    row[key] = int(row[key])
                elif key == "converged":
                    row[key] = row[key] == "true"
                else:
                    row[key] = float(row[key])
            out.append(row)
    return out


def estimate_bias(rows):
    """Mean and empirical sd of the fitted stationary parameters per cell
    group (generator, candidate, n_obs), over replicates.

    With a single replicate the sd is reported as absent (None).
    """
    groups = {}
    for row in rows:
        if row.get("error"):
            continue
        groups.setdefault((row["generator"], row["candidate"], row["n_obs"]), []).append(row)
    out = []
    for (gen, cand, n_obs), members in sorted(groups.items()):
        for param in BIAS_PARAMS:
            vals = np.array([m[param] for m in members], dtype=np.float64)
            out.append({
                "generator": gen,
                "candidate": cand,
                "n_obs": n_obs,
                "parameter": param,
                "mean": float(vals.mean()),
                "sd": float(vals.std(ddof=1)) if len(vals) > 1 else None,
                "n": len(vals),
            })
    return out


def write_bias_csv(path, bias_rows):
    cols = ("generator", "candidate", "n_obs", "parameter", "mean", "sd", "n")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in bias_rows:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")
