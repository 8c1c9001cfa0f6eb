import json

import pytest

from sshp.cli import preset_names, run

TINY = ["--preset", "desk", "--set", "synthetic.U=6", "--set", "synthetic.N=3"]


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert run(["simulate", *TINY, "--seed", "7", "--out", str(out)]) == 0
    return out


def _data(sim):
    return ["--events", str(sim / "events.csv"), "--assignments", str(sim / "assignments.csv")]


def test_simulate_outputs(sim):
    names = {p.name for p in sim.iterdir()}
    assert {"events.csv", "assignments.csv", "ground_truth.json", "resolved_config.json"} <= names
    truth = json.loads((sim / "ground_truth.json").read_text())
    assert len(truth["params"]["A"]) == 6
    assert json.loads((sim / "resolved_config.json").read_text())["seed"] == 7


def test_fit_ablate_flagged(sim, tmp_path):
    assert run(["fit", *TINY, *_data(sim), "--ablate", "d", "--set", "hyper.max_iter=5", "--out", str(tmp_path)]) == 0
    model = json.loads((tmp_path / "model.json").read_text())
    assert model["ablated"] == ["deadline"]
    assert all(x == 0.0 for row in model["params"]["Gd"] for x in row)
    assert (tmp_path / "loss_trace.csv").read_text().startswith("iteration,objective\n")


def test_predict_and_cluster(sim, tmp_path):
    fit_dir, pred_dir, cl_dir = tmp_path / "f", tmp_path / "p", tmp_path / "c"
    assert run(["fit", *TINY, *_data(sim), "--set", "hyper.max_iter=5", "--out", str(fit_dir)]) == 0
    model = str(fit_dir / "model.json")
    assert run(["predict", *TINY, *_data(sim), "--model", model, "--set", "hyper.n_trials=20", "--set", "hyper.z_max=2", "--out", str(pred_dir)]) == 0
    lines = (pred_dir / "predictions.csv").read_text().splitlines()
    assert lines[0] == "student_id,assignment_id,index,predicted_time" and len(lines) == 1 + 6 * 3 * 2
    assert run(["cluster", *TINY, *_data(sim), "--model", model, "--set", "cluster.k=2", "--out", str(cl_dir)]) == 0
    assert {"clusters.csv", "centroids.csv", "grade_test.json"} <= {p.name for p in cl_dir.iterdir()}


def test_evaluate_inline_matches_prefitted(sim, tmp_path):
    opts = [*TINY, *_data(sim), "--set", "hyper.max_iter=5", "--set", "hyper.n_trials=20", "--set", "hyper.z_max=3", "--set", "split.holdout_fraction=0.2"]
    assert run(["evaluate", *opts, "--out", str(tmp_path / "inline")]) == 0
    assert run(["fit", *opts, "--split", "--out", str(tmp_path / "fit")]) == 0
    assert run(["evaluate", *opts, "--model", str(tmp_path / "fit" / "model.json"), "--out", str(tmp_path / "pre")]) == 0
    a = (tmp_path / "inline" / "rmse_by_index.csv").read_bytes()
    assert a == (tmp_path / "pre" / "rmse_by_index.csv").read_bytes()
    assert set(json.loads((tmp_path / "inline" / "report.json").read_text())["sshp"]) == {"partial", "complete"}


def test_exit_codes(sim, tmp_path, capsys):
    assert run(["nonsense"]) == 1
    assert run(["fit", "--out", str(tmp_path), "--bogus-flag"]) == 1
    assert run(["fit", *_data(sim), "--ablate", "x", "--out", str(tmp_path)]) == 1
    assert run(["fit", "--events", str(tmp_path / "missing.csv"), "--assignments", str(sim / "assignments.csv"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("student_id,assignment_id,timestamp_hours\nu,zzz,1.0\n")
    assert run(["fit", "--events", str(bad), "--assignments", str(sim / "assignments.csv"), "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err


def test_presets_present():
    assert {"syn10", "syn90", "desk", "canvas", "morf", "grid"} <= set(preset_names())


def test_numerical_failure_exit_code(sim, tmp_path, monkeypatch, capsys):
    import sshp.cli as cli
    from sshp.inference import NumericalError

    def boom(*a, **k):
        raise NumericalError("non-finite loss at initialization, pair ('s0000', 'a000')")

    monkeypatch.setattr(cli, "fit", boom)
    assert run(["fit", *TINY, *_data(sim), "--out", str(tmp_path)]) == 3
    assert "s0000" in capsys.readouterr().err
