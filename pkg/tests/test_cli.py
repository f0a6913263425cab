import argparse
import json
import subprocess
import sys

import pytest

from cagm import cli, verify
from cagm.config import make_config

from test_trainer import SMALL


def write_config(path, **extra):
    path.write_text(make_config(SMALL | extra).to_text())
    return path


def test_parse_seeds():
    assert cli.parse_seeds("0,1, 2") == (0, 1, 2)
    for bad in ("", "a,b"):
        with pytest.raises(argparse.ArgumentTypeError):
            cli.parse_seeds(bad)


def test_run_then_plotdata(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.txt")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "run"), "--seeds", "0,1"]) == cli.EXIT_OK
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert [s["seed"] for s in summary["seeds"]] == [0, 1]
    assert cli.main(["plotdata", "--run", str(tmp_path / "run")]) == cli.EXIT_OK
    assert (tmp_path / "run" / "fig-val-loss.csv").exists()
    assert "fig-grad-norms.csv" in capsys.readouterr().out


@pytest.mark.parametrize("text", ["opt.eta = -1\n", "opt.nope = 1\n", "opt.eta = fast\n"])
def test_bad_config_exits_1(tmp_path, capsys, text):
    (tmp_path / "c.txt").write_text(text)
    assert cli.main(["run", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_exits_1(tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "absent.txt")]) == cli.EXIT_CONFIG


def test_divergence_exits_2(tmp_path):
    cfg = write_config(tmp_path / "c.txt", **{"opt.eta": 1e30})
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "run")]) == cli.EXIT_NUMERIC
    assert json.loads((tmp_path / "run" / "summary.json").read_text())["status"] == "failed"


def test_failed_verification_exits_3(tmp_path, monkeypatch):
    monkeypatch.setattr(verify, "CHECKS", [lambda: verify.Check("always fails", False, {})])
    assert cli.main(["verify", "--no-smoke", "--out", str(tmp_path)]) == cli.EXIT_VERIFY
    assert json.loads((tmp_path / "verify.json").read_text())["passed"] is False


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "cagm.cli", "--help"], capture_output=True, text=True, check=True)
    for sub in ("run", "grid", "ablate", "suite", "plotdata", "verify"):
        assert sub in out.stdout
