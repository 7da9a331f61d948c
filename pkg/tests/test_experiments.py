import csv
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from queuecontrol.cli import EXIT_CHECK_FAILED, EXIT_ERROR, EXIT_OK, main
from queuecontrol.config import ConfigError, ExperimentConfig
from queuecontrol.experiments import (
    OUT_DIR_ENV,
    second_moment_checks,
    manifest_hash,
    resolve_out_dir,
    run_experiment,
)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_config(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


# -- configuration ------------------------------------------------------------------


def test_defaults_match_reference_experiment():
    cfg = ExperimentConfig()
    d = cfg.dcp
    assert (d.sigma, d.theta, d.alpha, d.p, d.cost.family, d.cost.beta) == (1.0, 0.5, 0.5, 1.0, "exponential", 5.0)
    assert cfg.monte_carlo.dt == 1e-3 and cfg.monte_carlo.T == 40.0 and cfg.monte_carlo.n_paths == 100_000
    assert cfg.queue.n_list == [25, 100, 400, 1600] and cfg.queue.epsilon0 == 0.1
    b = cfg.budgets
    assert (b.se_multiplier, b.mc_absolute, b.qcp_absolute, b.fubini_se_multiplier) == (3.0, 0.02, 0.05, 2.0)


@given(
    kind=st.sampled_from(["sweep_wr", "solve", "verify_dcp", "converge_qcp", "conjugate_table"]),
    sigma=st.floats(0.1, 5), beta=st.floats(0.1, 20), n_paths=st.integers(2, 10**6),
    seed=st.integers(0, 2**63 - 1), levels=st.lists(st.floats(0, 10), max_size=4),
    r_list=st.none() | st.lists(st.floats(0, 10), min_size=1, max_size=5).map(sorted),
)
@settings(max_examples=100, deadline=None)
def test_config_round_trip(kind, sigma, beta, n_paths, seed, levels, r_list):
    cfg = ExperimentConfig.from_dict({
        "kind": kind, "dcp": {"sigma": sigma, "cost": {"beta": beta}},
        "monte_carlo": {"n_paths": n_paths, "seed": seed, "constant_levels": levels},
        "sweep": {"r_list": r_list},
    })
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.to_dict() == cfg.to_dict()


def test_config_file_round_trip(tmp_path):
    cfg = ExperimentConfig(kind="verify_dcp")
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("data,path", [
    ({"kind": "plot"}, "kind"),
    ({"dcp": {"sigma": -1}}, "dcp.sigma"),
    ({"dcp": {"cost": {"beta": 0}}}, "dcp.cost.beta"),
    ({"dcp": {"cost": {"family": "quadratic"}}}, "dcp.cost.family"),
    ({"dcp": {"gamma": 1}}, "dcp.gamma"),
    ({"monte_carlo": {"n_paths": 1}}, "monte_carlo.n_paths"),
    ({"monte_carlo": {"scheme": "milstein"}}, "monte_carlo.scheme"),
    ({"queue": {"n_list": [100, 25, 400]}}, "queue.n_list"),
    ({"kind": "converge_qcp", "queue": {"n_list": [25, 100]}}, "queue.n_list"),
    ({"queue": {"epsilon0": 1.5}}, "queue.epsilon0"),
    ({"sweep": {"r_list": [2.0, 1.0]}}, "sweep.r_list"),
    ({"shooting": 3}, "shooting"),
    ({"shooting": {"h": 0}}, "shooting.h"),
])
def test_config_errors_name_the_field(data, path):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(data)
    assert str(exc.value).startswith(path)


def test_invalid_json():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")


def test_out_dir_resolution(monkeypatch, tmp_path):
    cfg = ExperimentConfig()
    monkeypatch.delenv(OUT_DIR_ENV, raising=False)
    assert str(resolve_out_dir(cfg)) == "results"
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path))
    assert resolve_out_dir(cfg) == tmp_path
    assert str(resolve_out_dir(cfg, "elsewhere")) == "elsewhere"


def test_manifest_hash_ignores_output_dir():
    a = ExperimentConfig.from_dict({"output": {"dir": "a"}})
    b = ExperimentConfig.from_dict({"output": {"dir": "b"}})
    c = ExperimentConfig.from_dict({"monte_carlo": {"seed": 1}})
    assert manifest_hash(a) == manifest_hash(b) != manifest_hash(c)


def test_second_moment_checks():
    ok = second_moment_checks([1, 2, 3], [5.0, 6.0, 5.5], 3.0)
    assert all(c.passed for c in ok)
    up = second_moment_checks([1, 2, 3], [5.0, 6.0, 7.0], 3.0)
    assert not up[0].passed and up[1].passed
    wide = second_moment_checks([1, 2, 3], [1.0, 6.0, 2.0], 3.0)
    assert wide[0].passed and not wide[1].passed


# -- runners --------------------------------------------------------------------------


def test_conjugate_table(tmp_path):
    res = run_experiment(ExperimentConfig(kind="conjugate_table"), str(tmp_path))
    assert res.passed
    rows = read_csv(tmp_path / "conjugate_table.csv")
    mh = res.manifest["manifest_hash"]
    assert all(r["manifest_hash"] == mh for r in rows)
    exp = {float(r["y"]): float(r["F"]) for r in rows if r["family"] == "exponential"}
    rec = {float(r["y"]): float(r["F"]) for r in rows if r["family"] == "reciprocal"}
    assert exp[-5.0] == -1.0
    assert rec[-1.0] == -1.0
    assert any(r["family"] == "inverse" for r in rows)
    assert max(float(r["abs_diff"]) for r in rows) <= 1e-5


def test_sweep_reproduces_split_and_is_deterministic(tmp_path):
    cfg = ExperimentConfig(kind="sweep_wr")
    res = run_experiment(cfg, str(tmp_path / "a"))
    assert res.passed
    assert res.manifest["derived"]["classifications"] == ["LocalMax"] * 4 + ["HitZero"] * 3
    summary = read_csv(tmp_path / "a" / "sweep_wr_summary.csv")
    assert float(summary[0]["r"]) == 0.0 and summary[0]["classification"] == "LocalMax"
    assert float(summary[0]["x_event"]) == 0.0
    run_experiment(cfg, str(tmp_path / "b"))
    for name in ("sweep_wr.csv", "sweep_wr_summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "sweep_wr_manifest.json").read_text())
    assert manifest["all_passed"] and manifest["tool_version"]
    assert {c["name"] for c in manifest["checks"]} >= {"dichotomy", "comparison_ordering",
                                                       "non_tangential_crossing", "r_star_refinement"}


def test_solve_writes_value_table(tmp_path):
    res = run_experiment(ExperimentConfig(kind="solve"), str(tmp_path))
    assert res.passed
    rows = read_csv(tmp_path / "solve.csv")
    assert float(rows[0]["x"]) == 0.0 and float(rows[0]["Q_prime"]) == -1.0
    assert float(rows[-1]["x"]) == pytest.approx(20.0)
    d = res.manifest["derived"]
    assert d["Q0"] == pytest.approx(2.021698956768116, abs=1e-10)


def test_verify_dcp_small(tmp_path):
    cfg = ExperimentConfig.from_dict({"kind": "verify_dcp",
                                      "monte_carlo": {"n_paths": 300, "T": 10.0, "seed": 5}})
    res = run_experiment(cfg, str(tmp_path))
    names = {c.name for c in res.checks}
    assert {"feedback_matches_value", "dominance[zero]", "dominance[constant(4)]",
            "zero_control_identity", "feedback_is_minimum", "fubini[feedback]"} <= names
    rows = read_csv(tmp_path / "verify_dcp.csv")
    assert [r["policy"] for r in rows] == ["feedback", "zero", "constant(0.25)", "constant(1)", "constant(4)",
                                           "identity_zero_control"]
    assert res.passed


def test_converge_qcp_small(tmp_path):
    cfg = ExperimentConfig.from_dict({"kind": "converge_qcp",
                                      "queue": {"n_list": [4, 16, 64], "n_paths": 100, "T": 10.0}})
    res = run_experiment(cfg, str(tmp_path))
    rows = read_csv(tmp_path / "converge_qcp.csv")
    assert [int(r["n"]) for r in rows] == [4, 16, 64, 64]
    assert [r["policy"] for r in rows] == ["feedback"] * 3 + ["zero"]
    d = res.manifest["derived"]
    assert len(d["gaps"]) == 3 and len(d["second_moments"]) == 3
    assert {"gap_shrinks", "final_gap_within_budget", "second_moment_ratio"} <= {c.name for c in res.checks}


# -- CLI ------------------------------------------------------------------------------


def test_cli_ok(tmp_path, capsys):
    assert main(["conjugate-table", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS  conjugate_vs_grid_sup[exponential]" in out


def test_cli_check_failure(tmp_path):
    cfg = write_config(tmp_path, {"budgets": {"conjugate_tol": 1e-15}})
    assert main(["conjugate-table", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CHECK_FAILED


def test_cli_config_errors(tmp_path):
    bad = write_config(tmp_path, {"dcp": {"sigma": 0}})
    assert main(["solve", "--config", bad, "--out", str(tmp_path)]) == EXIT_ERROR
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == EXIT_ERROR
    garbled = tmp_path / "g.json"
    garbled.write_text("{")
    assert main(["solve", "--config", str(garbled)]) == EXIT_ERROR


def test_cli_solver_failure_is_runtime_error(tmp_path):
    # an unreachable residual budget makes the solver reject its own candidate
    cfg = write_config(tmp_path, {"budgets": {"residual_tol": 1e-14}})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path)]) == EXIT_ERROR


def test_cli_overrides_and_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "env"))
    cfg = write_config(tmp_path, {"kind": "solve", "conjugate": {"n_points": 20}})
    # the subcommand decides the kind even if the file says otherwise
    assert main(["conjugate-table", "--config", cfg, "--seed", "7", "--workers", "1"]) == EXIT_OK
    manifest = json.loads((tmp_path / "env" / "conjugate_table_manifest.json").read_text())
    assert manifest["config"]["monte_carlo"]["seed"] == 7
    assert manifest["kind"] == "conjugate_table"


def test_cli_rejects_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["plot"])
