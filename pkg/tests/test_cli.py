import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from fracspde.cli import (
    main,
    parse_config,
    read_data_csv,
    resolve_config,
    write_data_csv,
)
from fracspde.predict_score import crps_gaussian

TINY_SECTIONS = {
    "mesh": {"interest_rect": [0.0, 20.0, 0.0, 20.0],
             "extension_width": 20.0, "edge_length": 6.0},
    "model": {"class": "nf-s", "generator": "stationary"},
    "optimizer": {"max_iter": 40},
    "seed": 7,
}


def make_config(tmp_path, out_dir, **io):
    cfg = dict(TINY_SECTIONS)
    cfg["io"] = {"out_dir": str(out_dir), "grid": [5, 5],
                 "n_locations": 30, **io}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


# -- config resolution -----------------------------------------------------


def test_resolve_config_defaults():
    cfg = resolve_config({})
    assert set(cfg) == {"mesh", "priors", "model", "optimizer", "io", "seed"}
    assert cfg["model"]["class"] == "f-s"
    assert cfg["model"]["k"] == 2
    assert cfg["mesh"]["interest_rect"] == [0.0, 20.0, 0.0, 20.0]
    assert cfg["io"]["data"] is None
    assert cfg["seed"] == 0


def test_resolve_config_partial_merge():
    cfg = resolve_config({"optimizer": {"lr": 0.5}, "seed": 9})
    assert cfg["optimizer"]["lr"] == 0.5
    assert cfg["optimizer"]["max_iter"] == 2000  # untouched default
    assert cfg["seed"] == 9


def test_resolve_config_unknown_names():
    with pytest.raises(ValueError, match="unknown config section 'physics'"):
        resolve_config({"physics": {}})
    with pytest.raises(ValueError, match="unknown config key model.x"):
        resolve_config({"model": {"x": 1}})


@pytest.mark.parametrize("raw,msg", [
    ({"model": {"class": 3}}, "model.class: expected string, got int"),
    ({"model": {"k": 1.5}}, "model.k: expected int"),
    ({"optimizer": {"lr": True}}, "optimizer.lr: expected number, got bool"),
    ({"mesh": {"interest_rect": [1, 2, 3]}}, "expected list of 4 numbers"),
    ({"io": {"grid": [50]}}, "expected list of 2 ints"),
    ({"io": {"n_obs": [10, "x"]}}, "expected list of ints"),
    ({"seed": "x"}, "seed: expected int, got str"),
    ({"mesh": 3}, "section mesh: expected object"),
])
def test_resolve_config_type_errors(raw, msg):
    with pytest.raises(ValueError, match=msg):
        resolve_config(raw)


def test_resolve_config_root_must_be_object():
    with pytest.raises(ValueError, match="config root"):
        resolve_config([1, 2])


def test_resolve_config_coerces_numbers():
    cfg = resolve_config({"priors": {"c_rho": 2}})
    assert cfg["priors"]["c_rho"] == 2.0
    assert isinstance(cfg["priors"]["c_rho"], float)
    assert all(isinstance(v, float) for v in cfg["mesh"]["interest_rect"])


def test_parse_config_errors(tmp_path):
    with pytest.raises(ValueError, match="not found"):
        parse_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ValueError, match="not valid JSON"):
        parse_config(bad)


def test_config_survives_json_round_trip(tmp_path):
    cfg = resolve_config({"model": {"class": "f-ns"}, "seed": 3})
    path = tmp_path / "echo.json"
    path.write_text(json.dumps(cfg))
    assert parse_config(path) == cfg


# -- data files ------------------------------------------------------------


def test_data_csv_round_trip(tmp_path, rng):
    locs = rng.uniform(0.0, 1.0, size=(5, 2))
    vals = rng.normal(size=5)
    plain = tmp_path / "plain.csv"
    write_data_csv(plain, locs, vals)
    obs = read_data_csv(plain)
    assert_array_equal(obs.locations, locs)  # %.17g is exact
    assert_array_equal(obs.values, vals)
    assert_array_equal(obs.replicate, np.zeros(5, dtype=np.int64))

    tagged = tmp_path / "tagged.csv"
    write_data_csv(tagged, locs, vals, replicate=[0, 0, 1, 1, 2])
    obs = read_data_csv(tagged)
    assert_array_equal(obs.replicate, [0, 0, 1, 1, 2])


def test_read_data_csv_errors(tmp_path):
    with pytest.raises(ValueError, match="not found"):
        read_data_csv(tmp_path / "missing.csv")
    bad_header = tmp_path / "h.csv"
    bad_header.write_text("x,y,z\n0,0,1\n")
    with pytest.raises(ValueError, match=r"expected header x,y,value"):
        read_data_csv(bad_header)
    bad_extra = tmp_path / "e.csv"
    bad_extra.write_text("x,y,value,weight\n0,0,1,2\n")
    with pytest.raises(ValueError, match=r"expected header x,y,value"):
        read_data_csv(bad_extra)
    bad_row = tmp_path / "r.csv"
    bad_row.write_text("x,y,value\n0,0,1\n0,oops,2\n")
    with pytest.raises(ValueError, match="line 3"):
        read_data_csv(bad_row)


# -- subcommands -----------------------------------------------------------


def test_simulate_fit_predict_score_chain(tmp_path):
    """Full artifact chain on a coarse mesh, all through main()."""
    out = tmp_path / "out"
    cfg = make_config(tmp_path, out,
                      data=str(out / "observations.csv"),
                      truth=str(out / "truth.csv"))

    assert main(["simulate", "--config", str(cfg)]) == 0
    obs = read_data_csv(out / "observations.csv")
    assert obs.n == 30
    truth = read_data_csv(out / "truth.csv")
    assert truth.n == 25  # the 5x5 scoring grid
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["error"] is None
    assert set(manifest) == {"subcommand", "config", "status", "error",
                             "artifacts", "versions"}

    assert main(["fit", "--config", str(cfg)]) == 0
    fit = json.loads((out / "fit.json").read_text())
    assert fit["model_class"] == "nf-s"
    assert fit["nu"] == 1.0
    assert np.isfinite(fit["logpost"])
    trace_lines = (out / "trace.csv").read_text().splitlines()
    assert trace_lines[0] == "iteration,logpost,grad_norm,wall_ms"
    assert len(trace_lines) == 1 + fit["iterations"]

    assert main(["predict", "--config", str(cfg)]) == 0
    pred_lines = (out / "prediction.csv").read_text().splitlines()
    assert pred_lines[0] == "x,y,mean,sd,scale"
    assert len(pred_lines) == 26  # default grid = the io.grid 5x5

    assert main(["score", "--config", str(cfg)]) == 0
    score_lines = (out / "scores.csv").read_text().splitlines()
    assert score_lines[0] == "rmse,crps"
    rmse, crps = map(float, score_lines[1].split(","))
    assert 0.0 < rmse < 10.0 and 0.0 < crps < 10.0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "score"
    assert any(a.endswith("scores.csv") for a in manifest["artifacts"])


def test_score_perfect_prediction(tmp_path, rng):
    """Feeding the truth back as the prediction mean gives rmse 0."""
    out = tmp_path / "out"
    out.mkdir()
    locs = rng.uniform(0.0, 1.0, size=(6, 2))
    vals = rng.normal(size=6)
    truth = tmp_path / "truth.csv"
    write_data_csv(truth, locs, vals)
    with open(out / "prediction.csv", "w") as fh:
        fh.write("x,y,mean,sd,scale\n")
        for (x, y), v in zip(locs, vals):
            fh.write(f"{x:.17g},{y:.17g},{v:.17g},0.5,latent\n")
    cfg = make_config(tmp_path, out, truth=str(truth))
    assert main(["score", "--config", str(cfg)]) == 0
    rmse, crps = map(float, (out / "scores.csv").read_text().splitlines()[1].split(","))
    assert rmse == 0.0
    assert crps == pytest.approx(float(crps_gaussian(0.0, 0.0, 0.5)), rel=1e-12)


def test_calibrate_writes_penalties(tmp_path):
    out = tmp_path / "out"
    cfg = make_config(tmp_path, out)
    assert main(["calibrate", "--config", str(cfg)]) == 0
    cal = json.loads((out / "calibration.json").read_text())
    assert cal["basis"] == 8 and cal["c_ns"] == 10.0
    assert cal["tau_rho"] > 0 and cal["tau_sigma"] > 0 and cal["tau_v"] > 0


def test_flag_overrides_reach_config(tmp_path):
    out = tmp_path / "out"
    cfg = make_config(tmp_path, out)
    code = main(["calibrate", "--config", str(cfg),
                 "--class", "f-ns", "--basis", "16", "--cns", "5.0"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["model"]["class"] == "f-ns"
    assert manifest["config"]["model"]["basis"] == 16
    assert manifest["config"]["model"]["c_ns"] == 5.0
    assert json.loads((out / "calibration.json").read_text())["basis"] == 16


def test_study_subcommand_wiring(tmp_path, monkeypatch):
    """`study` maps the config onto a StudyConfig and forwards threads."""
    import fracspde.simstudy as mod

    seen = {}

    def fake_run(study, out_dir, resume=True, threads=1):
        seen.update(study=study, out_dir=out_dir, resume=resume, threads=threads)
        return []

    monkeypatch.setattr(mod, "run_study", fake_run)
    out = tmp_path / "out"
    cfg = make_config(tmp_path, out, n_replicates=2, n_obs=[10, 20],
                      study_max_iter=33)
    assert main(["study", "--config", str(cfg), "--threads", "3"]) == 0
    study = seen["study"]
    assert seen["threads"] == 3 and seen["resume"] is True
    assert study.seed == 7
    assert study.n_replicates == 2
    assert study.n_obs_list == (10, 20)
    assert study.max_iter == 33
    assert study.edge_length == 6.0
    assert [g.kind for g in study.generators] == ["stationary", "non-stationary"]
    assert [c.label for c in study.candidates] == [
        "NF-S", "NF-NS-B8-C10", "F-S", "F-NS-B8-C10"]


def test_failed_run_reports_and_writes_manifest(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = make_config(tmp_path, out)  # no io.data
    assert main(["fit", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: fit needs io.data")
    assert err.count("\n") == 1  # a single line, not a traceback
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["error"] == "ValueError: fit needs io.data (observation CSV)"
    assert manifest["artifacts"] == []


def test_bad_config_fails_before_dispatch(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"nope": 1}}))
    assert main(["fit", "--config", str(bad)]) == 1
    assert "unknown config key model.nope" in capsys.readouterr().err


def test_unknown_subcommand_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["transmogrify", "--config", "x.json"])
    assert exc.value.code == 2


def test_predict_requires_fit(tmp_path, capsys):
    out = tmp_path / "out"
    out.mkdir()
    obs = tmp_path / "obs.csv"
    write_data_csv(obs, np.array([[1.0, 1.0], [2.0, 2.0]]), np.array([0.1, 0.2]))
    cfg = make_config(tmp_path, out, data=str(obs))
    assert main(["predict", "--config", str(cfg)]) == 1
    assert "run `fit` first" in capsys.readouterr().err
