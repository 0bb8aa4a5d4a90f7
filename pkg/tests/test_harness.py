"""Scenario loading, deterministic runs, report rendering, sweeps, and
the command-line front end."""

import json

import pytest
from click.testing import CliRunner

from dapriv import report as report_mod
from dapriv.cli import main as cli_main
from dapriv.harness import run, run_sweep
from dapriv.scenario import EmergencySpec, Scenario, ScenarioError, load_scenario, scenario_from_dict


@pytest.fixture
def demo_scenario():
    return Scenario(
        seed=13,
        patients=4,
        physicians=2,
        labs=3,
        lab_sessions_per_patient=2,
        token_mode="baseline_ssn",
        coalition=("lab:0", "lab:1", "lab:2"),
        emergency=EmergencySpec(deposits=1, accesses=2, wrong_key_attempts=1),
    )


class TestLoadScenario:
    def test_minimal_yaml_gets_defaults(self, tmp_path):
        path = tmp_path / "s.yaml"
        path.write_text("seed: 5\npatients: 3\n")
        s = load_scenario(path)
        assert s.seed == 5 and s.patients == 3
        assert s.key_pool.public_threshold == 1
        assert s.anonymization.k == 2

    def test_json_accepted(self, tmp_path):
        path = tmp_path / "s.json"
        path.write_text(json.dumps({"seed": 9, "labs": 2}))
        assert load_scenario(path).labs == 2

    def test_unknown_field_named_in_error(self, tmp_path):
        path = tmp_path / "s.yaml"
        path.write_text("seed: 5\nfrobnicate: 1\n")
        with pytest.raises(ScenarioError, match="frobnicate"):
            load_scenario(path)

    def test_unknown_nested_field_named(self, tmp_path):
        path = tmp_path / "s.yaml"
        path.write_text("key_pool:\n  warp: 3\n")
        with pytest.raises(ScenarioError, match="warp"):
            load_scenario(path)

    def test_coalition_reference_validated(self):
        with pytest.raises(ScenarioError, match="lab:5"):
            scenario_from_dict({"labs": 2, "coalition": ["lab:5"]})

    def test_bad_token_mode(self):
        with pytest.raises(ScenarioError, match="token_mode"):
            scenario_from_dict({"token_mode": "carrier_pigeon"})

    def test_malformed_yaml_reports_path(self, tmp_path):
        path = tmp_path / "s.yaml"
        path.write_text("seed: [unclosed\n")
        with pytest.raises(ScenarioError, match="s.yaml"):
            load_scenario(path)


class TestRunDeterminism:
    def test_identical_reports(self, demo_scenario):
        a = run(demo_scenario)
        b = run(demo_scenario)
        assert a.to_json() == b.to_json()
        assert a.event_log_digest == b.event_log_digest

    def test_seed_changes_report(self, demo_scenario):
        a = run(demo_scenario)
        demo_scenario.seed += 1
        b = run(demo_scenario)
        assert a.event_log_digest != b.event_log_digest

    def test_all_invariants_pass(self, demo_scenario):
        report = run(demo_scenario)
        assert report.ok, report.invariants

    def test_emergency_counts(self, demo_scenario):
        report = run(demo_scenario)
        # 2 contact accesses + 1 wrong-key attempt, each notified
        assert report.notifications == 3


class TestReportRendering:
    def test_records_roundtrip(self, demo_scenario):
        report = run(demo_scenario)
        parsed = report_mod.parse_records(report_mod.records(report))
        kinds = [r["kind"] for r in parsed]
        assert kinds[0] == "header"
        assert kinds.count("flow") == len(report.flows)
        assert {"adversary", "quasi_linkage", "invariants"} <= set(kinds)
        header = parsed[0]
        assert header["digest"] == report.event_log_digest
        assert header["ok"] == report.ok

    def test_summary_mentions_invariants(self, demo_scenario):
        text = report_mod.summary(run(demo_scenario))
        assert "PASS" in text and "linkage rate" in text

    def test_emit_rejects_unknown_format(self, demo_scenario):
        with pytest.raises(ValueError):
            report_mod.emit(run(demo_scenario), "xml")

    def test_run_outputs_written(self, demo_scenario, tmp_path):
        written = report_mod.write_run_outputs(run(demo_scenario), tmp_path)
        names = {p.name for p in written}
        assert names == {"records.jsonl", "summary.txt", "metrics.png"}
        assert all(p.stat().st_size > 0 for p in written)
        assert (tmp_path / "metrics.png").read_bytes()[:8].startswith(b"\x89PNG")


class TestSweep:
    def base(self):
        return Scenario(
            seed=21,
            patients=2,
            labs=2,
            lab_sessions_per_patient=2,
            coalition=("lab:0", "lab:1"),
        )

    def test_rows_cover_values(self):
        rows = run_sweep(self.base(), "public_threshold", [1, 2], runs=3)
        assert [r.value for r in rows] == [1, 2]
        assert all(r.runs == 3 for r in rows)

    def test_threshold_one_has_zero_linkage_and_estimate(self):
        row = run_sweep(self.base(), "public_threshold", [1], runs=2)[0]
        assert row.linkage_rate == 0.0
        assert row.analytic_estimate == 0.0

    def test_unknown_parameter_rejected(self):
        with pytest.raises(ValueError, match="frobnicate"):
            run_sweep(self.base(), "frobnicate", [1])

    def test_sweep_outputs_written(self, tmp_path):
        rows = run_sweep(self.base(), "public_threshold", [1, 2], runs=2)
        written = report_mod.write_sweep_outputs(rows, tmp_path)
        names = {p.name for p in written}
        assert names == {"sweep_public_threshold.csv", "sweep_public_threshold.png"}
        csv_text = (tmp_path / "sweep_public_threshold.csv").read_text()
        assert csv_text.splitlines()[0] == "param,value,runs,linkage_rate,analytic_estimate"
        assert len(csv_text.splitlines()) == 3


class TestCli:
    def write_scenario(self, tmp_path, extra=""):
        path = tmp_path / "s.yaml"
        path.write_text(
            "seed: 2\npatients: 3\nlabs: 2\nlab_sessions_per_patient: 2\n"
            "coalition: [\"lab:0\", \"lab:1\"]\n" + extra
        )
        return str(path)

    def test_run_summary(self, tmp_path):
        result = CliRunner().invoke(cli_main, ["run", self.write_scenario(tmp_path)])
        assert result.exit_code == 0, result.output
        assert "linkage rate" in result.output

    def test_run_records(self, tmp_path):
        result = CliRunner().invoke(
            cli_main, ["run", self.write_scenario(tmp_path), "--emit", "records"]
        )
        assert result.exit_code == 0
        assert result.output.splitlines()[0].startswith('{"digest"')

    def test_seed_override_changes_digest(self, tmp_path):
        scenario = self.write_scenario(tmp_path)
        runner = CliRunner()
        out1 = runner.invoke(cli_main, ["run", scenario, "--emit", "records", "--seed", "1"]).output
        out2 = runner.invoke(cli_main, ["run", scenario, "--emit", "records", "--seed", "2"]).output
        assert out1.splitlines()[0] != out2.splitlines()[0]

    def test_out_dir_files(self, tmp_path):
        out = tmp_path / "results"
        result = CliRunner().invoke(
            cli_main, ["run", self.write_scenario(tmp_path), "--out", str(out)]
        )
        assert result.exit_code == 0
        assert (out / "records.jsonl").exists()
        assert (out / "metrics.png").exists()

    def test_sweep_table_and_figures(self, tmp_path):
        out = tmp_path / "sweep"
        result = CliRunner().invoke(
            cli_main,
            [
                "run", self.write_scenario(tmp_path),
                "--sweep", "public_threshold=1:2", "--runs", "2", "--out", str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "analytic" in result.output
        assert (out / "sweep_public_threshold.csv").exists()
        assert (out / "sweep_public_threshold.png").exists()

    def test_bad_scenario_is_cli_error(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("frobnicate: 1\n")
        result = CliRunner().invoke(cli_main, ["run", str(path)])
        assert result.exit_code != 0
        assert "frobnicate" in result.output

    def test_bad_sweep_spec(self, tmp_path):
        result = CliRunner().invoke(
            cli_main, ["run", self.write_scenario(tmp_path), "--sweep", "nonsense"]
        )
        assert result.exit_code != 0
