"""Command-line surface: gen/train/eval/run, exit codes, reproducibility."""
import json
import os

import numpy as np
import pytest

from canloc.cli import EXIT_DATA, EXIT_OK, EXIT_THRESHOLD, EXIT_USAGE, main
from canloc.tracefile import read_traces


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    # Small shared trace files (125 MS/s keeps them quick).
    assert main([
        "gen", "--out", str(root / "nw0.ctrc"), "--network", "Nw0",
        "--frames", "40", "--seed", "5", "--sample-rate", "125e6",
    ]) == EXIT_OK
    assert main([
        "gen", "--out", str(root / "nw4.ctrc"), "--network", "Nw4",
        "--frames", "30", "--seed", "6", "--sample-rate", "125e6",
    ]) == EXIT_OK
    return root


class TestGen:
    def test_round_robin_counts(self, workdir):
        traces = read_traces(workdir / "nw0.ctrc")
        assert len(traces) == 40
        labels = [t.source_label for t in traces]
        assert {labels.count(e) for e in ("L1", "L2", "L3", "L4", "L5")} == {8}

    def test_same_command_byte_identical(self, workdir):
        a, b = workdir / "rep_a.ctrc", workdir / "rep_b.ctrc"
        for out in (a, b):
            assert main([
                "gen", "--out", str(out), "--network", "Nw2", "--frames", "10",
                "--seed", "9", "--sample-rate", "125e6", "--attacker", "A2",
            ]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_seed_changes_output(self, workdir):
        a, b = workdir / "s1.ctrc", workdir / "s2.ctrc"
        main(["gen", "--out", str(a), "--network", "Nw0", "--frames", "4",
              "--seed", "1", "--sample-rate", "125e6"])
        main(["gen", "--out", str(b), "--network", "Nw0", "--frames", "4",
              "--seed", "2", "--sample-rate", "125e6"])
        assert a.read_bytes() != b.read_bytes()

    def test_invalid_network_is_usage_error(self, workdir, capsys):
        assert main([
            "gen", "--out", str(workdir / "x.ctrc"), "--network", "Nw9",
            "--frames", "4",
        ]) == EXIT_USAGE

    def test_missing_required_flag_is_usage_error(self):
        assert main(["gen", "--network", "Nw0"]) == EXIT_USAGE

    def test_bad_config_key_is_usage_error(self, workdir):
        cfg = workdir / "bad.cfg"
        cfg.write_text("bogus = 1\n")
        assert main([
            "gen", "--out", str(workdir / "x.ctrc"), "--config", str(cfg),
        ]) == EXIT_USAGE

    def test_env_seed_reproduces(self, workdir, monkeypatch):
        a, b = workdir / "env_a.ctrc", workdir / "env_b.ctrc"
        monkeypatch.setenv("CANLOC_SEED", "33")
        for out in (a, b):
            assert main(["gen", "--out", str(out), "--network", "Nw0",
                         "--frames", "4", "--sample-rate", "125e6"]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()


class TestTrainEvalRun:
    def test_missing_data_file_is_data_error(self, workdir):
        assert main([
            "train", "detector", "--data", str(workdir / "nope.ctrc"),
            "--out", str(workdir / "d.model"),
        ]) == EXIT_DATA

    def test_detector_train_eval_run_cycle(self, workdir, capsys):
        model = workdir / "det.model"
        code = main([
            "train", "detector", "--data", str(workdir / "nw0.ctrc"),
            "--out", str(model), "--seed", "3", "--epochs", "12",
            "--batch-size", "8",
        ])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "threshold:" in out
        assert model.exists()

        report = workdir / "det_report.json"
        code = main([
            "eval", "detector", "--model", str(model),
            "--clean", str(workdir / "nw0.ctrc"),
            "--dirty", str(workdir / "nw4.ctrc"),
            "--out", str(report),
        ])
        assert code == EXIT_OK
        record = json.loads(report.read_text())
        assert record["classes"] == ["clean", "dirty"]
        assert sum(sum(row) for row in record["confusion"]) == 70

        # Threshold gate: accuracy can never reach 1.01, so the gate trips.
        assert main([
            "eval", "detector", "--model", str(model),
            "--clean", str(workdir / "nw0.ctrc"),
            "--dirty", str(workdir / "nw4.ctrc"),
            "--min-accuracy", "1.01",
        ]) == EXIT_THRESHOLD

    def test_detector_training_deterministic(self, workdir):
        a, b = workdir / "det_a.model", workdir / "det_b.model"
        for out in (a, b):
            assert main([
                "train", "detector", "--data", str(workdir / "nw0.ctrc"),
                "--out", str(out), "--seed", "4", "--epochs", "6",
                "--batch-size", "8",
            ]) == EXIT_OK
        assert a.read_bytes() == b.read_bytes()

    def test_auth_train_eval_and_run(self, workdir, capsys):
        out_dir = workdir / "auth"
        code = main([
            "train", "auth", "--data", str(workdir / "nw0.ctrc"),
            "--out", str(out_dir), "--seed", "2", "--epochs", "2",
            "--batch-size", "8",
        ])
        assert code == EXIT_OK
        files = sorted(os.listdir(out_dir))
        assert files == [
            "auth_L1.model", "auth_L2.model", "auth_L3.model",
            "auth_L4.model", "auth_L5.model", "roster.json",
        ]

        report = workdir / "auth_report.json"
        assert main([
            "eval", "auth", "--models", str(out_dir),
            "--data", str(workdir / "nw0.ctrc"), "--out", str(report),
        ]) == EXIT_OK
        record = json.loads(report.read_text())
        assert set(record["per_ecu"]) == {"L1", "L2", "L3", "L4", "L5"}
        for rates in record["per_ecu"].values():
            assert 0.0 <= rates["frr"] <= 1.0
            assert 0.0 <= rates["far"] <= 1.0

        # far gate at -1 is impossible to satisfy whenever far is counted
        assert main([
            "eval", "auth", "--models", str(out_dir),
            "--data", str(workdir / "nw0.ctrc"), "--max-far", "-0.5",
        ]) == EXIT_THRESHOLD

        capsys.readouterr()
        det = workdir / "det.model"
        if not det.exists():
            main(["train", "detector", "--data", str(workdir / "nw0.ctrc"),
                  "--out", str(det), "--seed", "3", "--epochs", "12",
                  "--batch-size", "8"])
            capsys.readouterr()

        def run_once():
            code = main([
                "run", "--detector", str(det), "--auth", str(out_dir),
                "--data", str(workdir / "nw0.ctrc"), "--tp", "0.2", "--seed", "8",
            ])
            assert code == EXIT_OK
            return capsys.readouterr().out

        first, second = run_once(), run_once()
        assert first == second
        for line in first.strip().splitlines():
            record = json.loads(line)
            assert record["kind"] in ("TOPOLOGY_CHANGE", "SPOOF")
