import json
import os
import subprocess
import sys

import pytest

from stabilyze.cli import main, replay_manifest
from stabilyze.dynamics_model import figure1_model
from stabilyze.serialize import dumps

FAST_SIM = ["--paths", "200", "--steps", "100", "--burn-in", "2", "--thin", "0.1"]


def load(d, name):
    with open(os.path.join(d, name)) as fh:
        return json.load(fh)


def test_decompose_zero_forcing(tmp_path):
    for n in (1, 2, 3, 4):
        out = str(tmp_path / f"d{n}")
        assert main(["decompose", "--n", str(n), "--out", out]) == 0
        rep = load(out, "decompose.json")
        assert all(c == {"num": 0, "den": 1} for c in rep["chain"]["c"])
        man = load(out, "manifest.json")
        assert man["command"] == "decompose" and man["exit_code"] == 0
        assert set(man["outputs"]) == {"decompose.json"}


def test_figure1_outputs(tmp_path):
    out = str(tmp_path / "f")
    assert main(["figure1", "--out", out, "--count", "50"]) == 0
    lines = (tmp_path / "f" / "figure1.csv").read_text().splitlines()
    assert lines[0] == "curve,r,theta" and len(lines) > 50
    info = load(out, "figure1.json")
    # unstable curve r²θ + r/2 + 1 = 0
    assert info["c"] == [{"num": 1, "den": 2}, {"num": 1, "den": 1}]
    assert "unstable" in info["curves"] and "boundary_S0_S1_plus" in info["curves"]


def test_build_then_verify(tmp_path):
    model = tmp_path / "fig.json"
    model.write_text(dumps(figure1_model().to_dict()))
    out = str(tmp_path / "b")
    assert main(["build", "--model", str(model), "--out", out]) == 0
    assert len(load(out, "build.json")["wedges"]) == 3
    assert main(["verify", "--model", str(model), "--out", out, "--r-max", "1e6",
                 "--boundary-samples", "20"]) == 0
    man = load(out, "manifest.json")
    assert man["inputs"]["model"]["name"] == "fig.json"


def test_verify_reports_violation(tmp_path):
    params = tmp_path / "p.json"
    params.write_text(json.dumps({"h": 50.0}))
    out = str(tmp_path / "v")
    assert main(["verify", "--n", "2", "--params", str(params), "--out", out, "--r-max", "1e4",
                 "--boundary-samples", "20"]) == 1
    assert load(out, "verify.json")["ok"] is False
    assert load(out, "manifest.json")["status"] == "violations"


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["tail", "--paths", "0"],
    ["density", "--annulus", "10"],
    ["dynkin", "--function", "cube"],
    ["build", "--n", "two"],
])
def test_usage_errors_exit_2(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)] if argv else argv) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_param_key_is_usage_error(tmp_path):
    params = tmp_path / "p.json"
    params.write_text(json.dumps({"zeta": 1}))
    assert main(["build", "--params", str(params), "--out", str(tmp_path)]) == 2


def test_simulate_and_reuse_samples(tmp_path):
    out = str(tmp_path / "s")
    assert main(["simulate", "--out", out, "--seed", "4"] + FAST_SIM) == 0
    meta = load(out, "samples.bin.json")
    assert meta["count"] == 200 * 100 and meta["seed"] == 4
    dens = str(tmp_path / "dd")
    code = main(["density", "--samples", os.path.join(out, "samples.bin"), "--annulus", "1,3",
                 "--bins", "2,4", "--out", dens])
    assert code in (0, 1)
    assert (tmp_path / "dd" / "density.csv").read_text().startswith("r_bin,theta_bin,count,rho_hat,c_hat")
    assert load(dens, "manifest.json")["inputs"]["samples"]["name"] == "samples.bin"


def test_dynkin_command(tmp_path):
    out = str(tmp_path / "k")
    assert main(["dynkin", "--paths", "5000", "--times", "0.1,0.2", "--out", out]) == 0
    rep = load(out, "dynkin.json")
    assert rep["function"] == "abs" and rep["sign_ok"]


def test_replay_is_identical(tmp_path):
    first = str(tmp_path / "one")
    assert main(["simulate", "--out", first, "--seed", "9"] + FAST_SIM) == 0
    rep = replay_manifest(os.path.join(first, "manifest.json"), str(tmp_path / "two"))
    assert rep["exit_code"] == 0 and rep["identical"]
    a = (tmp_path / "one" / "manifest.json").read_text()
    b = (tmp_path / "two" / "manifest.json").read_text()
    assert a == b


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "stabilyze.cli", "decompose", "--n", "2", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "j=0" in r.stdout
