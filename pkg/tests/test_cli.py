import json
from pathlib import Path

import pytest

from covplan.cli import EXIT_NONCONVERGED, EXIT_OK, EXIT_SCENARIO, main
from covplan.reports import emit

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"
TOY = str(SCENARIO_DIR / "toy_single.json")
FLEET = str(SCENARIO_DIR / "desk_fleet.json")


class TestExitCodes:
    def test_missing_scenario_file_exits_2(self, tmp_path):
        code = main(["run", "single", "--scenario", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "out")])
        assert code == EXIT_SCENARIO

    def test_schema_violation_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 1, "seed": 1, "targets": []}))
        code = main(["run", "single", "--scenario", str(bad),
                     "--out", str(tmp_path / "out")])
        assert code == EXIT_SCENARIO

    def test_nonconvergence_exits_3(self, tmp_path):
        doc = json.loads(Path(TOY).read_text())
        doc["dp"]["vi_tolerance"] = 1e-14
        doc["dp"]["max_sweeps"] = 2
        path = tmp_path / "tight.json"
        path.write_text(json.dumps(doc))
        code = main(["run", "single", "--scenario", str(path),
                     "--out", str(tmp_path / "out")])
        assert code == EXIT_NONCONVERGED


class TestPrintConfig:
    def test_prints_and_skips_run(self, tmp_path, capsys):
        code = main(["run", "single", "--scenario", TOY,
                     "--out", str(tmp_path / "out"), "--print-config"])
        assert code == EXIT_OK
        printed = json.loads(capsys.readouterr().out)
        assert printed["dp"]["gamma"] == 0.9
        assert printed["grid"]["n_lambda"] == 4
        assert not (tmp_path / "out" / "report.json").exists()


class TestCommands:
    def test_grid_build(self, tmp_path):
        code = main(["grid", "build", "--scenario", TOY, "--out", str(tmp_path)])
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "grid_target0.json").read_text())
        assert doc["kind"] == "covariance_grid"

    def test_plan_local(self, tmp_path):
        code = main(["plan", "local", "--scenario", TOY, "--out", str(tmp_path)])
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "local_policy_target0.json").read_text())
        assert doc["kind"] == "local_policy"

    def test_plan_cluster(self, tmp_path):
        code = main(["plan", "cluster", "--scenario", TOY, "--out", str(tmp_path)])
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "cluster_policy.json").read_text())
        assert doc["kind"] == "cluster_policy"
        assert doc["tours"]

    def test_run_single_writes_report_and_figures(self, tmp_path):
        code = main(["run", "single", "--scenario", TOY, "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "trajectory.csv").exists()
        assert (tmp_path / "trajectory.png").exists()

    def test_run_baseline(self, tmp_path):
        code = main(["run", "baseline", "--scenario", TOY, "--policy", "static",
                     "--out", str(tmp_path)])
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "report_static.json").read_text())
        assert doc["totals"]["distance"] == 0.0

    def test_run_cluster(self, tmp_path):
        code = main(["run", "cluster", "--scenario", TOY, "--out", str(tmp_path)])
        assert code == EXIT_OK
        assert (tmp_path / "error_vs_observations.csv").exists()
        assert (tmp_path / "error_vs_observations.png").exists()

    def test_sweep_rho(self, tmp_path):
        code = main(["sweep", "rho", "--scenario", TOY, "--out", str(tmp_path),
                     "--values", "0.01", "0.5"])
        assert code == EXIT_OK
        rows = (tmp_path / "rho_sweep.csv").read_text().strip().split("\n")
        assert rows[0] == "rho,reward,uncertainty_reduction,distance"
        assert len(rows) == 3
        assert (tmp_path / "rho_sweep.png").exists()


@pytest.fixture(scope="module")
def fleet_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("fleet")
    code = main(["run", "fleet", "--scenario", FLEET, "--out", str(out)])
    assert code == EXIT_OK
    return out


class TestFleetCommand:
    def test_artifacts_exist(self, fleet_out):
        for name in ("report.json", "trace.jsonl", "summary.csv",
                      "assignment_timeline.csv", "assignment_timeline.png",
                      "trajectory.csv", "trajectory.png"):
            assert (fleet_out / name).exists(), name

    def test_trace_record_schema(self, fleet_out):
        first = json.loads((fleet_out / "trace.jsonl").read_text().split("\n")[0])
        assert {"kind", "tick", "round", "robot", "mode", "position",
                "c_curr", "c_next", "bid", "free_count"} <= set(first)

    def test_trajectory_rows_equal_tick_records(self, fleet_out):
        n_ticks = sum(1 for line in (fleet_out / "trace.jsonl").read_text().split("\n")
                      if line and json.loads(line)["kind"] == "tick")
        rows = (fleet_out / "trajectory.csv").read_text().strip().split("\n")
        assert len(rows) - 1 == n_ticks

    def test_emit_from_trace(self, fleet_out, tmp_path):
        paths = emit("assignment-timeline", fleet_out / "trace.jsonl", tmp_path)
        assert all(Path(p).exists() for p in paths)
        paths = emit("trajectory-polyline", fleet_out / "trace.jsonl", tmp_path)
        assert all(Path(p).exists() for p in paths)

    def test_emit_cli_unknown_kind(self, fleet_out, tmp_path):
        with pytest.raises(SystemExit):
            main(["emit", "--kind", "nope", "--source",
                  str(fleet_out / "trace.jsonl"), "--out", str(tmp_path)])


class TestSeedOverride:
    def test_seed_flag_changes_grid(self, tmp_path):
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(["grid", "build", "--scenario", TOY, "--out", str(out_a)]) == EXIT_OK
        assert main(["grid", "build", "--scenario", TOY, "--out", str(out_b),
                     "--seed", "99"]) == EXIT_OK
        a = (out_a / "grid_target0.json").read_text()
        b = (out_b / "grid_target0.json").read_text()
        assert a != b
