import csv
import json

import pytest

from crembed.cli import main


def run(tmp_path, *args, name="out"):
    out = tmp_path / name
    code = main(list(args) + ["--out", str(out)])
    return code, out


def test_ledger_sim_default_reports_feasible_at_two(tmp_path):
    code, out = run(tmp_path, "ledger-sim")
    assert code == 0
    assert json.loads((out / "ledger.json").read_text()) == {"feasible": True, "t0": 2}
    rows = list(csv.DictReader((out / "feasibility.csv").open()))
    assert rows[0]["violation_index"] == "1" and rows[0]["violation_flags"] == "high"


def test_kernel_test_writes_one_row_per_pair(tmp_path):
    code, out = run(tmp_path, "kernel-test")
    assert code == 0
    rows = list(csv.DictReader((out / "kernel_vanishing.csv").open()))
    assert len(rows) == 100
    assert max(float(r["max_abs_below_q"]) for r in rows) <= 1e-10


def test_missing_model_file_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("model: no_such_model.yaml\n")
    code, out = run(tmp_path, "levi-analyze", "--config", str(cfg))
    assert code == 2
    rec = json.loads((out / "error.json").read_text())
    assert rec["path"].endswith("no_such_model.yaml")
    assert "no_such_model.yaml" in capsys.readouterr().err


def test_missing_config_file_is_a_usage_error(tmp_path):
    code, out = run(tmp_path, "iterate", "--config", str(tmp_path / "absent.yaml"))
    assert code == 2 and "absent.yaml" in json.loads((out / "error.json").read_text())["path"]


def test_unknown_config_key_is_rejected(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("deltaa0: 0.1\n")
    code, _ = run(tmp_path, "iterate", "--config", str(cfg))
    assert code == 2


def test_usage_errors_exit_two(tmp_path):
    assert main(["not-a-command"]) == 2
    assert main(["iterate", "--threads", "0", "--out", str(tmp_path / "t")]) == 2


def test_numerical_failure_exits_one(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    # oversized initial data violates the iteration budget
    cfg.write_text("delta0: 0.5\n")
    code, out = run(tmp_path, "iterate", "--config", str(cfg))
    assert code == 1


@pytest.mark.parametrize("command", ["iterate", "cech-mock", "ledger-sim"])
def test_reruns_are_byte_identical(tmp_path, command):
    code1, a = run(tmp_path, command, "--seed", "3", name="a")
    code2, b = run(tmp_path, command, "--seed", "3", name="b")
    assert code1 == code2 == 0
    files = sorted(p.name for p in a.iterdir() if p.name != "meta.json")
    assert files == sorted(p.name for p in b.iterdir() if p.name != "meta.json")
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    meta = json.loads((a / "meta.json").read_text())
    assert "started" in meta and meta["seed"] == 3


def test_sectioned_config_and_model_file(tmp_path):
    from pathlib import Path
    cfg = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"
    code, out = run(tmp_path, "levi-analyze", "--config", str(cfg))
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["passed"] and summary["min_negative_count"] >= 2
