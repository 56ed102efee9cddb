import csv
import json

import numpy as np
import pytest

from qregret.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_OK, THREADS_ENV, default_threads, main, seed_sweep_summary
from qregret.runner import CSV_COLUMNS, execute, results_json_text
from qregret.scenario import (ConfigError, apply_overrides, bundled_names, load_scenario, parse_matrix,
                              parse_schedule, read_config)

SMALL = ["n_traj=40", "T=0.5", "dt=0.01"]


def _errors(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def _write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def test_bundled_corpus_validates(capsys):
    names = bundled_names()
    assert len(names) >= 8
    for name in names:
        assert main(["validate", name]) == EXIT_OK
    assert main(["list-scenarios"]) == EXIT_OK
    listed = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in listed[-len(names):]] == names


def test_malformed_config_reports_field_paths(tmp_path, capsys):
    doc = read_config("qnd_pm1")
    doc["dt"] = -1
    doc["kind"] = "heterodyne"
    del doc["n_traj"]
    assert main(["validate", _write(tmp_path, doc)]) == EXIT_CONFIG
    err = _errors(capsys)
    assert err["error"] == "config"
    paths = {e["path"] for e in err["errors"]}
    assert {"$.dt", "$.kind", "$"} <= paths
    assert any("n_traj" in e["message"] for e in err["errors"])


def test_semantic_config_errors(tmp_path, capsys):
    doc = read_config("qnd_pm1")
    doc["true_model"]["rho0"] = [[0.7, 0], [0, 0.7]]
    assert main(["validate", _write(tmp_path, doc)]) == EXIT_CONFIG
    assert _errors(capsys)["errors"][0]["path"].startswith("$.true_model")
    doc = read_config("qnd_pm1")
    del doc["nominal_model"]
    assert main(["validate", _write(tmp_path, doc)]) == EXIT_CONFIG
    assert _errors(capsys)["errors"][0]["path"] == "$.nominal_model"
    doc = read_config("qnd_pm1")
    doc["horizons"] = [0.5, 3.0]
    assert main(["validate", _write(tmp_path, doc)]) == EXIT_CONFIG
    assert main(["validate", "no_such_scenario"]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["validate", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    assert "line 1" in _errors(capsys)["errors"][0]["message"]


def test_overrides():
    doc = apply_overrides({"a": {"b": 1}, "c": [1, 2]}, ["a.b=2.5", "c.1=\"x\"", "d=word", "a.e=[1, 2]"])
    assert doc == {"a": {"b": 2.5, "e": [1, 2]}, "c": [1, "x"], "d": "word"}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({"c": [1]}, ["c.5=1"])
    sc = load_scenario("qnd_pm1", ["n_traj=7", "base_seed=99"])
    assert sc.cfg.n_traj == 7 and sc.cfg.base_seed == 99


def test_matrix_parsing():
    m = parse_matrix([[1, [0, -1]], [[0, 1], 2.5]])
    assert np.array_equal(m, np.array([[1, -1j], [1j, 2.5]]))
    with pytest.raises(ConfigError):
        parse_matrix([[1, 2]])
    with pytest.raises(ConfigError):
        parse_matrix([[1]], dim=2)
    s = parse_schedule([{"t": 0, "matrix": [[1]]}, {"t": 0.5, "matrix": [[2]]}], 1, "$.a")
    assert s.at(0.7)[0, 0] == 2 and s.at(0.2)[0, 0] == 1


def test_nominal_inherits_from_true_model():
    sc = load_scenario("qnd_pm1")
    assert sc.pair.true_model.same_dynamics(sc.pair.nominal_model)
    assert np.array_equal(sc.pair.nominal_model.rho0, np.diag([0.0, 1.0]))


def test_matched_run_is_exactly_zero(tmp_path, capsys):
    out = tmp_path / "matched"
    assert main(["run", "matched_qubit", "--out", str(out)] + sum((["--set", s] for s in SMALL), [])) == EXIT_OK
    doc = json.loads((out / "results.json").read_text())
    rows = doc["rows"]
    for r in rows:
        if r["task"] in ("regret", "divergence_lnlambda", "divergence_integrand", "bound_qre"):
            assert r["mean"] == 0.0 and r["std_error"] == 0.0
    assert all(r["satisfied"] for r in rows if r["satisfied"] is not None)
    with open(out / "results.csv") as fh:
        table = list(csv.DictReader(fh))
    assert tuple(table[0]) == CSV_COLUMNS and len(table) == len(rows)
    assert "results written" in capsys.readouterr().out


def test_qnd_run_gives_twice_the_horizon(tmp_path):
    sc = load_scenario("qnd_pm1", ["n_traj=200"])
    res = execute(sc)
    assert res.row("divergence_integrand", 1.0)["mean"] == pytest.approx(2.0, abs=1e-9)
    d = res.row("divergence_lnlambda", 1.0)
    assert abs(d["mean"] - 2.0) <= 3 * d["std_error"]


def test_results_are_byte_identical_across_runs_and_threads(tmp_path):
    overrides = SMALL + ["chunk_size=7", "horizons=[0.25, 0.5]"]
    texts = []
    for threads in (1, 1, 2):
        out = tmp_path / f"run{len(texts)}"
        assert main(["run", "theorem2_counting_qubit", "--out", str(out), "--threads", str(threads)]
                    + sum((["--set", s] for s in overrides + ["tasks=[\"regret\", \"divergence_lnlambda\"]"]),
                          [])) == EXIT_OK
        texts.append((out / "results.json").read_bytes())
    assert texts[0] == texts[1] == texts[2]
    assert b"wall_time" not in texts[0]


def test_results_json_text_is_deterministic():
    sc = load_scenario("corollary1_qnd_pair", SMALL + ["horizons=[0.25, 0.5]"])
    assert results_json_text(execute(sc), sc) == results_json_text(execute(sc), sc)


def test_threads_env(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert default_threads() == 3
    monkeypatch.setenv(THREADS_ENV, "junk")
    assert default_threads() == 1
    monkeypatch.delenv(THREADS_ENV)
    assert default_threads() == 1


def test_failure_budget_exit(tmp_path, capsys):
    doc = {"name": "support_gap", "kind": "poissonian", "dim": 2, "dt": 0.01, "T": 1.0, "n_traj": 50,
           "true_model": {"rho0": [[0, 0], [0, 1]], "a": [[0, 1], [0, 0]]},
           "nominal_model": {"rho0": [[1, 0], [0, 0]]},
           "tasks": ["regret", "divergence_lnlambda"]}
    out = tmp_path / "gap"
    assert main(["run", _write(tmp_path, doc), "--out", str(out)]) == EXIT_BUDGET
    err = _errors(capsys)
    assert err["error"] == "failure_budget" and err["failures"] > 0.01 * err["records"]
    rows = json.loads((out / "results.json").read_text())["rows"]
    ident = [r for r in rows if r["task"] == "regret_minus_divergence"][0]
    assert ident["satisfied"] is None
    doc["failure_budget"] = 1.0
    assert main(["run", _write(tmp_path, doc), "--out", str(out)]) == EXIT_OK


def test_seed_sweep_summary_skips_exact_rows():
    rows = [[{"task": "a", "horizon": 1.0, "mean": m, "std_error": 0.1},
             {"task": "exact", "horizon": 1.0, "mean": 2.0, "std_error": 0.0}] for m in (1.0, 1.1, 0.9)]
    summary = seed_sweep_summary(rows)
    assert len(summary) == 1 and summary[0]["task"] == "a"
    assert summary[0]["ratio"] == pytest.approx(1.0)


def test_seed_sweep_command(tmp_path):
    out = tmp_path / "sweep"
    argv = ["seed-sweep", "qnd_pm1", "--seeds", "3", "--out", str(out)]
    assert main(argv + sum((["--set", s] for s in ["n_traj=50", "T=0.5", "dt=0.01"]), [])) == EXIT_OK
    summary = json.loads((out / "seed_sweep.json").read_text())
    assert {s["task"] for s in summary} == {"divergence_lnlambda", "regret_minus_divergence",
                                            "divergence_routes_gap"}
    assert all(s["seeds"] == 3 for s in summary)
    assert (out / "seed_sweep.csv").read_text().startswith("task,horizon,seeds")


def test_traces_and_record_dump(tmp_path):
    out = tmp_path / "tr"
    sc = load_scenario("diagonal_hmm_gaussian", SMALL + ["tasks=[\"regret\", \"traces\", \"dump_records\"]",
                                                         "options={\"trace_records\": 2, \"dump_records\": 3}"])
    execute(sc, out)
    traces = sorted(p.name for p in (out / "traces").iterdir())
    assert traces == ["record_0000.csv", "record_0001.csv"]
    head = (out / "traces" / traces[0]).read_text().splitlines()[0]
    assert head == "label,t,q_mean,q2_mean,log_trace"
    assert (out / "records.csv.gz").exists()
