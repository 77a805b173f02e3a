import json

import numpy as np
import pytest

from longipred import simulator as sim
from longipred.cli import run
from longipred.cohort import Cohort, Observation, Subject, write_cohort_dir


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


@pytest.fixture
def scenario(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(dict(n_subjects=40, n_test=10, n_loci=8, n_clinical=2, n_features=2,
                                    beta_bar=[5.0], theta=[[1, 1, 1, 1]])))
    return path


def test_pipeline_outputs_and_determinism(tmp_path, scenario):
    for name in ("a", "b"):
        assert run(["pipeline", "--scenario", str(scenario), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a = _tree(tmp_path / "a")
    for required in ("cohort/subjects.csv", "cohort/observations.csv", "cohort/truth.json", "model.json",
                     "predictions.csv", "report.json", "plotdata.csv", "manifest-pipeline.json"):
        assert required in a
    assert a == _tree(tmp_path / "b")
    manifest = json.loads(a["manifest-pipeline.json"])
    assert manifest["seed"] == 7 and manifest["version"]
    assert "scenario.json" in " ".join(manifest["inputs"])
    assert manifest["outputs"]["model.json"]


def test_seed_changes_output(tmp_path, scenario):
    run(["pipeline", "--scenario", str(scenario), "--seed", "1", "--out", str(tmp_path / "a")])
    run(["pipeline", "--scenario", str(scenario), "--seed", "2", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/model.json").read_bytes() != (tmp_path / "b/model.json").read_bytes()


def test_simulate_requires_seed(tmp_path, capsys):
    assert run(["simulate", "--preset", "strong_h", "--out", str(tmp_path)]) == 2
    assert "seed" in capsys.readouterr().err


def test_fit_degenerate_design(tmp_path, capsys):
    subs = [Subject(f"s{i}", 70, [i % 3, 1], [float(i)], [float(i)], [1.0]) for i in range(6)]
    write_cohort_dir(Cohort(subs, [Observation(f"s{i}", 70, [2.0]) for i in range(6)]), tmp_path / "c")
    assert run(["fit", "--train", str(tmp_path / "c"), "--out", str(tmp_path / "o")]) == 2
    assert "DegenerateDesign" in capsys.readouterr().err


def test_bad_input_file(tmp_path, capsys):
    (tmp_path / "c").mkdir()
    (tmp_path / "c/subjects.csv").write_text("id,x_b,g_1,c_1,f_1,y_1\na,70,5,0,0,1\n")
    assert run(["fit", "--train", str(tmp_path / "c"), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "BadGenotype" in err and "subjects.csv:2" in err


def test_unknown_subcommand():
    assert run(["frobnicate"]) == 2


def test_stepwise_commands(tmp_path, scenario):
    d = tmp_path
    assert run(["simulate", "--scenario", str(scenario), "--seed", "3", "--out", str(d / "sim")]) == 0
    assert (d / "sim/manifest-simulate.json").exists()

    assert run(["fit", "--train", str(d / "sim/train"), "--out", str(d / "fit"), "--max-iter", "1"]) == 3
    assert run(["fit", "--train", str(d / "sim/train"), "--out", str(d / "fit"), "--max-iter", "1",
                "--allow-unconverged"]) == 0
    assert run(["fit", "--train", str(d / "sim/train"), "--out", str(d / "fit")]) == 0
    model = str(d / "fit/model.json")

    assert run(["predict", "--model", model, "--test", str(d / "sim/test"), "--out", str(d / "pred")]) == 0
    rows = (d / "pred/predictions.csv").read_text().splitlines()
    assert rows[0] == "id,x_t,dim,y_hat,term_pop,term_G,term_C,term_I"
    assert len(rows) == 1 + 10 * 3  # every observed follow-up age
    assert run(["predict", "--model", model, "--test", str(d / "sim/test"), "--out", str(d / "pred2"),
                "--horizons", "1,2", "--methods", "full,pop"]) == 0
    assert len((d / "pred2/predictions.csv").read_text().splitlines()) == 1 + 10 * 2
    assert (d / "pred2/predictions-pop.csv").exists()

    assert run(["evaluate", "--model", model, "--test", str(d / "sim/test"), "--out", str(d / "ev")]) == 0
    report = json.loads((d / "ev/report.json").read_text())
    assert report["methods"] == ["full", "pop", "carry"]

    assert run(["kernel-dump", "--train", str(d / "sim/train"), "--model", model, "--out", str(d / "k")]) == 0
    K = np.loadtxt(d / "k/K_G.csv", delimiter=",", skiprows=1, usecols=range(1, 31))
    assert K.shape == (30, 30) and np.allclose(K, K.T)


def test_config_file_and_flag_precedence(tmp_path, scenario):
    run(["simulate", "--scenario", str(scenario), "--seed", "3", "--out", str(tmp_path / "sim")])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_iter": 1}))
    train = str(tmp_path / "sim/train")
    assert run(["fit", "--config", str(cfg), "--train", train, "--out", str(tmp_path / "f1")]) == 3
    assert run(["fit", "--config", str(cfg), "--max-iter", "200", "--train", train, "--out", str(tmp_path / "f2")]) == 0


def test_strata_filters(tmp_path):
    sc = tmp_path / "s.json"
    sc.write_text(json.dumps(dict(n_subjects=50, n_test=0, n_loci=6, n_clinical=2, n_features=2, beta_bar=[5.0],
                                  strata=[dict(name="healthy", fraction=0.8), dict(name="disease", fraction=0.2,
                                                                                    beta_shift=[3.0])])))
    out = tmp_path / "o"
    assert run(["pipeline", "--scenario", str(sc), "--seed", "0", "--out", str(out),
                "--stratum-train", "healthy", "--stratum-test", "disease"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["errors"]["full"][0]) == 10
    model = json.loads((out / "model.json").read_text())
    assert len(model["bank"]["ids"]) == 40


def test_anatomy_pipeline_reports_dice(tmp_path):
    sc = tmp_path / "a.json"
    doc = sim.preset("anatomy", grid=48, n_subjects=24, n_test=4).to_dict()
    sc.write_text(json.dumps(doc))
    assert run(["pipeline", "--scenario", str(sc), "--seed", "1", "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o/report.json").read_text())
    assert set(report["dice"]) == {"full", "pop", "carry", "observed"}
    assert all(0 <= v <= 1 for per in report["dice"].values() for v in per.values())
    model = json.loads((tmp_path / "o/model.json").read_text())
    assert "deformation" in model["extras"]
