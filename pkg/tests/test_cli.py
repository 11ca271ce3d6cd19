import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from deft import cli, data, sysid
from deft.topology import pad_layout

CONFIGS = Path(__file__).resolve().parents[1] / "demos" / "configs"


@pytest.fixture(scope="module")
def rest_run(tmp_path_factory):
    """The rest scenario simulated for 30 steps."""
    out = tmp_path_factory.mktemp("rest") / "run"
    cfg = tmp_path_factory.mktemp("cfg")
    shutil.copy(CONFIGS / "rest_topology.json", cfg)
    text = (CONFIGS / "rest.cfg").read_text().replace("steps = 100", "steps = 30")
    (cfg / "rest.cfg").write_text(text)
    assert cli.main(["simulate", "--config", str(cfg / "rest.cfg"), "--out", str(out)]) == cli.OK
    return out


def test_simulate_rest_produces_no_motion(rest_run):
    ds = data.load_dataset(rest_run)
    assert len(ds) == 31
    mask = pad_layout(ds.topo).mask
    assert np.max(np.abs(ds.frames[:, mask] - ds.frames[0, mask])) < 1e-6
    reports = [json.loads(line) for line in (rest_run / "reports.jsonl").read_text().splitlines()]
    assert len(reports) == 30 and all(r["converged"] for r in reports)
    assert (rest_run / "step.cfg").exists()


def test_identify_train_and_evaluate_pipeline(rest_run, tmp_path, capsys):
    params = tmp_path / "fit.json"
    code = cli.main(["identify", "--dataset", str(rest_run), "--out", str(params), "--horizon", "5",
                     "--max-iters", "3", "--free", "twist", "--sharing", "shared",
                     "--report", str(tmp_path / "rep.json")])
    assert code in (cli.OK, cli.NOT_CONVERGED)
    assert sysid.load_params(params)
    assert "iterations" in json.loads((tmp_path / "rep.json").read_text())
    net = tmp_path / "net.json"
    assert cli.main(["train-residual", "--dataset", str(rest_run), "--params", str(params), "--out", str(net),
                     "--epochs", "3", "--hidden", "4"]) == cli.OK
    table = tmp_path / "table.json"
    assert cli.main(["evaluate", "--dataset", str(rest_run), "--params", str(params), "--residual", str(net),
                     "--horizon", "5", "--all", "--json", str(table)]) == cli.OK
    rows = json.loads(table.read_text())
    assert [r["model"] for r in rows] == ["full", "no-residual", "no-sysid", "no-orient", "no-attach", "no-inext"]
    assert "RMSE" in capsys.readouterr().out


def test_config_errors_exit_2(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.cfg")]) == cli.CONFIG_ERROR
    (tmp_path / "a.cfg").write_text("[model]\nsegment = 0.05\n")
    assert cli.main(["simulate", "--config", str(tmp_path / "a.cfg")]) == cli.CONFIG_ERROR
    shutil.copy(CONFIGS / "rest_topology.json", tmp_path)
    (tmp_path / "b.cfg").write_text("[model]\ntopology = rest_topology.json\n[step]\nkappa = -1\n")
    assert cli.main(["simulate", "--config", str(tmp_path / "b.cfg")]) == cli.CONFIG_ERROR
    (tmp_path / "c.cfg").write_text("[model]\ntopology = rest_topology.json\n[step]\ngravity = 0 0\n")
    assert cli.main(["simulate", "--config", str(tmp_path / "c.cfg")]) == cli.CONFIG_ERROR
    assert cli.main(["evaluate", "--dataset", str(tmp_path / "nowhere")]) == cli.CONFIG_ERROR
    assert cli.main(["bench", "--children", "x..y"]) == cli.CONFIG_ERROR


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--trials", "5"]) == cli.OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


def test_small_bench(tmp_path, capsys):
    csv = tmp_path / "bench.csv"
    assert cli.main(["bench", "--children", "1,2", "--parent-n", "8", "--child-n", "4", "--steps", "8",
                     "--out", str(csv)]) == cli.OK
    rows = csv.read_text().splitlines()
    assert rows[0].startswith("benchmark,size,variant")
    assert len(rows) > 4
    assert "sequential / batched" in capsys.readouterr().out


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "deft.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "identify", "train-residual", "evaluate", "gradcheck", "bench"):
        assert cmd in out.stdout
