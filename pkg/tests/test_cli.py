import json
import subprocess
import sys

import pytest

from ehsim.cli import main
from ehsim.metrics import MEASUREMENTS, WAVEFORM_METRICS
from ehsim.simcore import random_params


def rows(path):
    return len(path.read_text().splitlines()) - 1


def test_simulate_geometry(tmp_path):
    e, g = tmp_path / "e.csv", tmp_path / "g.csv"
    assert main(["simulate", "--duration", "10", "--out-ecg", str(e), "--out-ppg", str(g)]) == 0
    assert rows(e) == 1200 and rows(g) == 400


def test_simulate_with_params_file(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(random_params(4).to_json())
    e, g = tmp_path / "e.csv", tmp_path / "g.csv"
    assert main(["simulate", "--params", str(p), "--duration", "2", "--out-ecg", str(e), "--out-ppg", str(g)]) == 0
    assert rows(e) == 240 and rows(g) == 80


def test_usage_errors(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 2


def test_console_script_without_args():
    out = subprocess.run([sys.executable, "-m", "ehsim.cli"], capture_output=True, text=True)
    assert out.returncode == 2 and "usage" in out.stderr


def test_missing_file_exits_1(tmp_path, capsys):
    assert main(["fit-groups", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path):
    c = tmp_path / "c.json"
    c.write_text('{"fit": {"unknown": 1}}')
    assert main(["--config", str(c), "simulate", "--out-ecg", "e", "--out-ppg", "g"]) == 1


@pytest.mark.parametrize("modality", ["e", "p"])
def test_residual_check_self_generated(tmp_path, modality):
    p = tmp_path / "p.json"
    p.write_text(random_params(5).to_json())
    e, g, out = tmp_path / "e.csv", tmp_path / "g.csv", tmp_path / "r.json"
    assert main(["simulate", "--params", str(p), "--fine-fs", "120", "--warmup", "0", "--duration", "5",
                 "--out-ecg", str(e), "--out-ppg", str(g)]) == 0
    wave, fs = (e, "120") if modality == "e" else (g, "40")
    if modality == "p":
        # the PPG stride-3 samples are not an Euler trajectory at 40 Hz; regenerate at that rate
        c = tmp_path / "c.json"
        c.write_text(json.dumps({"sim": {"ecg_fs": 40, "ppg_fs": 40}}))
        assert main(["--config", str(c), "simulate", "--params", str(p), "--fine-fs", "40", "--warmup", "0",
                     "--duration", "5", "--out-ecg", str(e), "--out-ppg", str(g)]) == 0
    assert main(["residual-check", "--waveform", str(wave), "--params", str(p), "--modality", modality,
                 "--fs", fs, "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["max_abs"] <= 1e-9
    assert rep["gronwall"]["ratio"] <= 1 and rep["gronwall"]["holds"]


def test_small_pipeline(tmp_path):
    d = tmp_path
    cfg = d / "cfg.json"
    cfg.write_text(json.dumps({"fit": {"max_iters": 4}}))
    run = lambda *a: main(["--config", str(cfg), *map(str, a)])
    assert run("gen-data", "--out", d / "data", "--n-groups", 2, "--n-per-group", 3, "--seed", 1) == 0
    assert run("fit-groups", "--data", d / "data", "--out", d / "params.json") == 0
    params = json.loads((d / "params.json").read_text())
    assert sorted(params) == ["g0", "g1"]
    assert run("flow-train", "--data", d / "data", "--params", d / "params.json", "--out", d / "model.json") == 0
    model = json.loads((d / "model.json").read_text())
    assert set(model["train_losses"]) == {"L_RF", "L_sim_e", "L_sim_p", "L_Flow"}
    assert run("flow-sample", "--data", d / "data", "--model", d / "model.json", "--out", d / "gen") == 0
    assert run("flow-eval", "--data", d / "data", "--model", d / "model.json", "--params", d / "params.json",
               "--out", d / "feval.json") == 0
    assert json.loads((d / "feval.json").read_text()) == model["train_losses"]
    assert run("eval", "--ref", d / "data", "--gen", d / "gen", "--out", d / "eval.json",
               "--beats-csv", d / "beats.csv") == 0
    rep = json.loads((d / "eval.json").read_text())
    assert set(rep["table1"]) == set(WAVEFORM_METRICS)
    assert set(rep["table2"]) == set(MEASUREMENTS)
    assert rep["excluded"] == ["FID"]
    assert run("eval", "--ref", d / "data", "--gen", d / "data", "--fd", "gaussian", "--out", d / "self.json") == 0
    self_rep = json.loads((d / "self.json").read_text())
    assert self_rep["table1"]["MAE"] == 0.0 and self_rep["table1"]["FD"] == pytest.approx(0.0, abs=1e-6)
    assert run("losses", "--data", d / "data", "--params", d / "params.json", "--out", d / "losses.json") == 0
    terms = json.loads((d / "losses.json").read_text())
    assert set(terms) == {"pat", "rec", "kl", "gpa", "lid", "csd", "total"}


def test_fit_command(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(random_params(6).to_json())
    e, g = tmp_path / "e.csv", tmp_path / "g.csv"
    assert main(["simulate", "--params", str(p), "--duration", "4", "--out-ecg", str(e), "--out-ppg", str(g)]) == 0
    out, trace = tmp_path / "fit.json", tmp_path / "trace.csv"
    assert main(["fit", "--ecg", str(e), "--ppg", str(g), "--max-iters", "4", "--out-params", str(out),
                 "--out-trace", str(trace)]) == 0
    assert "omega" in json.loads(out.read_text())
    lines = trace.read_text().splitlines()
    assert lines[0] == "iter,stage,L_ecg,L_ppg,L_deriv,L_peak,total" and len(lines) == 5
