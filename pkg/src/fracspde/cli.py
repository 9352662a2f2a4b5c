"""Command-line entry point: config parsing, data ingestion, subcommands.

Configs are JSON with fixed sections (mesh, priors, model, optimizer, io)
plus a top-level seed; unknown sections or keys are rejected by name, known
keys are type-checked, and every run writes ``manifest.json`` into the
output directory echoing the fully resolved config -- also on failure,
together with the failure reason.  Artifacts contain no timestamps, so a
rerun with the same config and seed reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

__all__ = ["RunConfig", "parse_config", "resolve_config", "dispatch", "main"]

# section -> key -> (type label, default); None means "must be set to use
# the subcommand that needs it", not "invalid".
_SCHEMA = {
    "mesh": {
        "interest_rect": ("list of 4 numbers", [0.0, 20.0, 0.0, 20.0]),
        "extension_width": ("number", 20.0),
        "edge_length": ("number", 1.6),
    },
    "priors": {
        "c_rho": ("number", 10.0),
        "c_sigma": ("number", 1.0),
        "c_a": ("number", 4.0),
        "c_nu": ("number", 1.0),
        "c_nu_hpd": ("number", 1.8),
        "nu_max": ("number", 2.0),
        "c_sigma_n": ("number", 0.32),
    },
    "model": {
        "class": ("string", "f-s"),
        "basis": ("int (8 or 16)", 8),
        "c_ns": ("number", 10.0),
        "k": ("int", 2),
        "eps": ("number", 1e-4),
        "nu_fixed": ("number", 1.0),
        "generator": ("string", "stationary"),
        "true_nu": ("number", 0.5),
        "true_rho0": ("number", 10.0),
        "true_sigma0": ("number", 1.0),
        "noise_var": ("number", 0.1),
    },
    "optimizer": {
        "lr": ("number", 0.01),
        "max_iter": ("int", 2000),
        "tol": ("number", 1e-4),
    },
    "io": {
        "data": ("string", None),
        "out_dir": ("string", "out"),
        "locations": ("string", None),
        "prediction": ("string", None),
        "truth": ("string", None),
        "scale": ("string", "latent"),
        "replicate": ("int", None),
        "n_locations": ("int", 1000),
        "grid": ("list of 2 ints", [50, 50]),
        "n_replicates": ("int", 5),
        "n_obs": ("list of ints", [125, 500]),
        "study_max_iter": ("int", 500),
    },
}


class RunConfig(dict):
    """Resolved configuration; plain nested dict with attribute sugar."""

    def section(self, name):
        return self[name]


def _check_type(section, key, label, value):
    def fail():
        raise ValueError(f"config key {section}.{key}: expected {label}, "
                         f"got {type(value).__name__}")

    if value is None:
        return None
    if label == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            fail()
        return float(value)
    if label.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            fail()
        return value
    if label == "string":
        if not isinstance(value, str):
            fail()
        return value
    if label == "list of 4 numbers":
        if not (isinstance(value, list) and len(value) == 4
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
            fail()
        return [float(v) for v in value]
    if label == "list of 2 ints":
        if not (isinstance(value, list) and len(value) == 2
                and all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
            fail()
        return list(value)
    if label == "list of ints":
        if not (isinstance(value, list)
                and all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
            fail()
        return list(value)
    raise AssertionError(label)


def resolve_config(raw: dict) -> RunConfig:
    """Fill defaults and validate; unknown sections/keys are errors."""
    if not isinstance(raw, dict):
        raise ValueError(f"config root: expected object, got {type(raw).__name__}")
    out = RunConfig()
    for name in raw:
        if name != "seed" and name not in _SCHEMA:
            raise ValueError(f"unknown config section {name!r}")
    for name, keys in _SCHEMA.items():
        given = raw.get(name, {})
        if not isinstance(given, dict):
            raise ValueError(f"config section {name}: expected object, "
                             f"got {type(given).__name__}")
        for key in given:
            if key not in keys:
                raise ValueError(f"unknown config key {name}.{key}")
        out[name] = {
            key: _check_type(name, key, label, given.get(key, default))
            for key, (label, default) in keys.items()
        }
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ValueError(f"config key seed: expected int, got {type(seed).__name__}")
    out["seed"] = seed
    return out


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ValueError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
    return resolve_config(raw)


# -- shared plumbing -------------------------------------------------------


def _build_mesh(config):
    from .mesh import build_rect_mesh

    m = config["mesh"]
    return build_rect_mesh(tuple(m["interest_rect"]), m["extension_width"],
                           m["edge_length"])


def _prior_config(config):
    from .priors import derive_hyper

    p = config["priors"]
    return derive_hyper(p["c_rho"], p["c_sigma"], p["c_a"], p["c_nu"],
                        p["c_nu_hpd"], p["nu_max"], p["c_sigma_n"])


def _calibration(config):
    """Penalty taus for the configured basis and C_NS (seed-deterministic)."""
    from .priors import SpectralPenalty, calibrate_penalty, q_ns_diagonal
    from .simstudy import basis_for

    m = config["model"]
    spec = basis_for(m["basis"], tuple(config["mesh"]["interest_rect"]))
    taus = {}
    for fi, fieldname in enumerate(("rho", "sigma", "v")):
        rng = np.random.default_rng(np.random.SeedSequence(
            config["seed"], spawn_key=(2, m["basis"], int(m["c_ns"] * 100), fi)
        ))
        taus[fieldname] = calibrate_penalty(fieldname, m["c_ns"], spec, rng)
    penalty = SpectralPenalty(q_ns_diagonal(spec), taus["rho"], taus["sigma"],
                              taus["v"])
    return spec, penalty, taus


def _model_state(config, mesh):
    from .inference import ModelState

    m = config["model"]
    cls = m["class"]
    if cls.endswith("-ns"):
        spec, penalty, _ = _calibration(config)
        return ModelState(mesh, cls, _prior_config(config), basis=spec,
                          penalty=penalty, k=m["k"], eps=m["eps"],
                          nu_fixed=m["nu_fixed"])
    return ModelState(mesh, cls, _prior_config(config), k=m["k"], eps=m["eps"],
                      nu_fixed=m["nu_fixed"])


def read_data_csv(path):
    """Observation CSV with header x,y,value[,replicate]."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"data file not found: {path}")
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["x", "y", "value"]:
            raise ValueError(f"{path}: expected header x,y,value[,replicate]")
        has_rep = len(header) == 4 and header[3].strip() == "replicate"
        if len(header) > 3 and not has_rep:
            raise ValueError(f"{path}: expected header x,y,value[,replicate]")
        xs, ys, vals, reps = [], [], [], []
        for i, rowv in enumerate(reader):
            if not rowv:
                continue
            try:
                xs.append(float(rowv[0]))
                ys.append(float(rowv[1]))
                vals.append(float(rowv[2]))
                reps.append(int(rowv[3]) if has_rep else 0)
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path} line {i + 2}: {exc}") from exc
    from .inference import ObservationSet

    return ObservationSet(np.column_stack([xs, ys]), np.array(vals),
                          np.array(reps, dtype=np.int64))


def write_data_csv(path, locations, values, replicate=None):
    with open(path, "w") as fh:
        if replicate is None:
            fh.write("x,y,value\n")
            for (x, y), v in zip(locations, values):
                fh.write(f"{x:.17g},{y:.17g},{v:.17g}\n")
        else:
            fh.write("x,y,value,replicate\n")
            for (x, y), v, r in zip(locations, values, replicate):
                fh.write(f"{x:.17g},{y:.17g},{v:.17g},{int(r)}\n")


def _write_manifest(out_dir, subcommand, config, status, error=None, artifacts=()):
    import scipy

    from . import __version__

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "status": status,
        "error": error,
        "artifacts": sorted(str(a) for a in artifacts),
        "versions": {"fracspde": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))


# -- subcommands -----------------------------------------------------------


def _study_config(config, **overrides):
    from .simstudy import CandidateSpec, GeneratorSpec, StudyConfig

    io, m = config["io"], config["model"]
    fields = dict(
        generators=(GeneratorSpec("stationary", nu=m["true_nu"], rho0=m["true_rho0"],
                                  sigma0=m["true_sigma0"]),
                    GeneratorSpec("non-stationary", nu=m["true_nu"], rho0=m["true_rho0"],
                                  sigma0=m["true_sigma0"], n_basis=m["basis"],
                                  c_ns_v=m["c_ns"])),
        candidates=(CandidateSpec("nf-s"),
                    CandidateSpec("nf-ns", m["basis"], m["c_ns"]),
                    CandidateSpec("f-s"),
                    CandidateSpec("f-ns", m["basis"], m["c_ns"])),
        n_replicates=io["n_replicates"],
        n_obs_list=tuple(io["n_obs"]),
        n_locations=io["n_locations"],
        noise_var=m["noise_var"],
        interest_rect=tuple(config["mesh"]["interest_rect"]),
        extension_width=config["mesh"]["extension_width"],
        edge_length=config["mesh"]["edge_length"],
        grid_shape=tuple(io["grid"]),
        k_rational=m["k"],
        eps=m["eps"],
        max_iter=io["study_max_iter"],
        c_a=config["priors"]["c_a"],
        c_nu=config["priors"]["c_nu"],
        c_nu_hpd=config["priors"]["c_nu_hpd"],
        nu_max=config["priors"]["nu_max"],
        seed=config["seed"],
    )
    fields.update(overrides)
    return StudyConfig(**fields)


def _cmd_simulate(config, out_dir, args):
    from .simstudy import GeneratorSpec, generate_dataset

    m, io = config["model"], config["io"]
    gen = GeneratorSpec(m["generator"], nu=m["true_nu"], rho0=m["true_rho0"],
                        sigma0=m["true_sigma0"], n_basis=m["basis"], c_ns_v=m["c_ns"])
    study = _study_config(config, generators=(gen,), n_obs_list=(1,))
    mesh = _build_mesh(config)
    rep = io["replicate"] or 0
    data = generate_dataset(study, gen, mesh, rep)
    obs_path = out_dir / "observations.csv"
    truth_path = out_dir / "truth.csv"
    write_data_csv(obs_path, data.locations, data.values,
                   np.full(len(data.values), rep))
    write_data_csv(truth_path, data.grid, data.truth)
    return [obs_path, truth_path]


def _cmd_calibrate(config, out_dir, args):
    _, _, taus = _calibration(config)
    path = out_dir / "calibration.json"
    path.write_text(json.dumps(
        {"basis": config["model"]["basis"], "c_ns": config["model"]["c_ns"],
         "tau_rho": taus["rho"], "tau_sigma": taus["sigma"], "tau_v": taus["v"]},
        indent=1))
    return [path]


def _cmd_fit(config, out_dir, args):
    from .inference import fit_map, write_trace

    io = config["io"]
    if not io["data"]:
        raise ValueError("fit needs io.data (observation CSV)")
    obs = read_data_csv(io["data"])
    mesh = _build_mesh(config)
    state = _model_state(config, mesh)
    priors = state.priors
    opt = config["optimizer"]
    nu0 = config["priors"]["c_nu"] if state.fractional else state.nu_fixed
    u0 = state.pack_interpretable(config["priors"]["c_rho"], config["priors"]["c_sigma"],
                                  1.0, 0.0, nu0, config["priors"]["c_sigma_n"] ** 2)
    fit = fit_map(state, obs, u0, lr=opt["lr"], max_iter=opt["max_iter"],
                  tol=opt["tol"])
    p = fit.params
    fit_path = out_dir / "fit.json"
    fit_path.write_text(json.dumps({
        "model_class": state.model_class,
        "u": list(fit.u),
        "log_kappa0": p.log_kappa0, "log_sigma0": p.log_sigma0,
        "vx0": p.vx0, "vy0": p.vy0, "nu": p.nu,
        "alpha_kappa": list(p.alpha_kappa), "alpha_sigma": list(p.alpha_sigma),
        "alpha_vx": list(p.alpha_vx), "alpha_vy": list(p.alpha_vy),
        "sigma_n2": fit.sigma_n2, "logpost": fit.logpost,
        "converged": fit.converged, "iterations": fit.n_iter,
        "wall_s": fit.wall_s,
    }, indent=1))
    trace_path = out_dir / "trace.csv"
    write_trace(trace_path, fit.trace)
    return [fit_path, trace_path]


def _load_fit(config, out_dir):
    from .fields import FieldParams

    path = out_dir / "fit.json"
    if not path.exists():
        raise ValueError(f"no fit found at {path}; run `fit` first")
    d = json.loads(path.read_text())
    params = FieldParams(
        d["log_kappa0"], d["log_sigma0"], d["vx0"], d["vy0"], d["nu"],
        np.array(d["alpha_kappa"]), np.array(d["alpha_sigma"]),
        np.array(d["alpha_vx"]), np.array(d["alpha_vy"]),
    )
    if d["model_class"] != config["model"]["class"]:
        raise ValueError(f"fit at {path} is for model class {d['model_class']}, "
                         f"config says {config['model']['class']}")
    return params, d["sigma_n2"]


def _cmd_predict(config, out_dir, args):
    from .mesh import read_locations_csv
    from .predict_score import predict, write_prediction_csv

    io = config["io"]
    if not io["data"]:
        raise ValueError("predict needs io.data (observation CSV)")
    obs = read_data_csv(io["data"])
    mesh = _build_mesh(config)
    state = _model_state(config, mesh)
    params, sigma_n2 = _load_fit(config, out_dir)
    if io["locations"]:
        locs = read_locations_csv(io["locations"])
    else:
        from .simstudy import grid_locations

        locs = grid_locations(_study_config(config, n_obs_list=(1,)))
    pred = predict(state, obs, params, sigma_n2, locs, scale=io["scale"],
                   replicate=io["replicate"])
    path = out_dir / "prediction.csv"
    write_prediction_csv(path, pred)
    return [path]


def _cmd_score(config, out_dir, args):
    from .predict_score import crps_gaussian

    io = config["io"]
    pred_path = Path(io["prediction"] or (out_dir / "prediction.csv"))
    if not pred_path.exists():
        raise ValueError(f"prediction file not found: {pred_path}")
    if not io["truth"]:
        raise ValueError("score needs io.truth (CSV with x,y,value)")
    truth = read_data_csv(io["truth"])
    with open(pred_path) as fh:
        reader = csv.DictReader(fh)
        need = {"x", "y", "mean", "sd"}
        if not need.issubset(reader.fieldnames or ()):
            raise ValueError(f"{pred_path}: expected columns x,y,mean,sd,scale")
        rows = list(reader)
    if len(rows) != truth.n:
        raise ValueError(f"prediction has {len(rows)} rows, truth has {truth.n}")
    mean = np.array([float(r["mean"]) for r in rows])
    sd = np.array([float(r["sd"]) for r in rows])
    locs = np.column_stack([[float(r["x"]) for r in rows],
                            [float(r["y"]) for r in rows]])
    if not np.allclose(locs, truth.locations, atol=1e-8):
        raise ValueError("prediction and truth locations differ")
    rmse = float(np.sqrt(np.mean((truth.values - mean) ** 2)))
    crps = float(np.mean(crps_gaussian(truth.values, mean, sd)))
    path = out_dir / "scores.csv"
    with open(path, "w") as fh:
        fh.write("rmse,crps\n")
        fh.write(f"{rmse:.17g},{crps:.17g}\n")
    return [path]


def _cmd_study(config, out_dir, args):
    from .simstudy import run_study

    run_study(_study_config(config), out_dir, resume=True,
              threads=args.threads)
    return [out_dir / "results.csv", out_dir / "bias.csv"]


_COMMANDS = {
    "simulate": _cmd_simulate,
    "calibrate": _cmd_calibrate,
    "fit": _cmd_fit,
    "predict": _cmd_predict,
    "score": _cmd_score,
    "study": _cmd_study,
}


def dispatch(subcommand, config: RunConfig, args) -> int:
    out_dir = Path(config["io"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        artifacts = _COMMANDS[subcommand](config, out_dir, args)
    except Exception as exc:
        _write_manifest(out_dir, subcommand, config, "failed",
                        error=f"{type(exc).__name__}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_manifest(out_dir, subcommand, config, "ok",
                    artifacts=artifacts + [out_dir / "manifest.json"])
    return 0


def _parser():
    parser = argparse.ArgumentParser(
        prog="fracspde",
        description="Gaussian random fields with fractional, non-stationary "
                    "anisotropic covariance operators",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, doc in [
        ("simulate", "draw a synthetic dataset from a generator"),
        ("calibrate", "compute non-stationarity penalty values"),
        ("fit", "MAP-fit a model to observation data"),
        ("predict", "posterior mean/sd at new locations from a saved fit"),
        ("score", "RMSE and CRPS of a prediction against held-out values"),
        ("study", "run the candidate-model comparison study"),
    ]:
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="path to JSON config")
        p.add_argument("--class", dest="model_class",
                       choices=["nf-s", "nf-ns", "f-s", "f-ns"],
                       help="override model.class")
        p.add_argument("--basis", type=int, choices=[8, 16],
                       help="override model.basis")
        p.add_argument("--cns", type=float, choices=[2.0, 5.0, 10.0],
                       help="override model.c_ns")
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes for study cells (default 1)")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        config = parse_config(args.config)
        if args.model_class:
            config["model"]["class"] = args.model_class
        if args.basis:
            config["model"]["basis"] = args.basis
        if args.cns:
            config["model"]["c_ns"] = args.cns
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return dispatch(args.subcommand, config, args)


if __name__ == "__main__":
    sys.exit(main())
