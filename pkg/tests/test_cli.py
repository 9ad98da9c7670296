import json
import os
import subprocess
import sys

import numpy as np
import pytest

from chipmunk_sim.cli import main


@pytest.fixture()
def net(tmp_path):
    path = tmp_path / "net.chmk.json"
    assert main(["generate", "--topology", "30,110,20", "--n-y", "5", "--scale", "0.5", "--out", str(path)]) == 0
    return path


def test_quantize_writes_streams(net, tmp_path, capsys):
    out = tmp_path / "bins"
    assert main(["quantize", "--network", str(net), "--out-dir", str(out)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["saturations"] == 0 and len(rep["files"]) == 3
    files = sorted(p.name for p in out.iterdir())
    assert files == ["net.dense.chmk.bin", "net.layer0.chmk.bin", "net.layer1.chmk.bin"]
    # layer 0: 2x2 blocks, the second column carries vectors
    assert (out / "net.layer0.chmk.bin").stat().st_size == 2 * 73744 + 2 * 74416


def test_run_report_deterministic(net, tmp_path, capsys):
    r1, r2 = tmp_path / "a.json", tmp_path / "b.json"
    args = ["run", "--network", str(net), "--geometry", "2x2", "--frames", "4", "--seed", "3"]
    assert main(args + ["--report", str(r1)]) == 0
    assert main(args + ["--report", str(r2)]) == 0
    assert r1.read_bytes() == r2.read_bytes()
    d = json.loads(r1.read_text())
    assert d["n_tiles"] == 4 and d["extra"]["frames"] == 4
    out = capsys.readouterr().out
    assert "Execution time" in out and "Peak power" in out


def test_run_builtin_ctc(capsys, tmp_path):
    rep = tmp_path / "r.json"
    assert main(["run", "--network", "ctc-3l-421h-uni", "--geometry", "5x5x3", "--frames", "0",
                 "--op-point", "0.75V", "--report", str(rep)]) == 0
    d = json.loads(rep.read_text())
    assert d["peak_power_w"] == pytest.approx(0.16575)
    assert d["deadline_met"]
    assert "1x" not in capsys.readouterr().err


def test_run_options(net, tmp_path):
    frames = tmp_path / "f.npy"
    np.save(frames, np.random.default_rng(0).uniform(-1, 1, (3, 30)))
    out = tmp_path / "y.json"
    rep = tmp_path / "r.json"
    assert main(["run", "--network", str(net), "--frames", str(frames), "--output", str(out),
                 "--cycle-param", "include_io=off", "--overlap-load", "on",
                 "--op-point", "custom:100:10", "--report", str(rep)]) == 0
    assert np.array(json.loads(out.read_text())).shape == (3, 5)
    d = json.loads(rep.read_text())
    assert d["extra"]["cycle_params"]["overlap_load"] is True
    assert d["freq_hz"] == 100e6


def test_verify_pass_and_tamper(net, tmp_path, capsys):
    out = tmp_path / "bins"
    main(["quantize", "--network", str(net), "--out-dir", str(out)])
    bins = [str(out / "net.layer0.chmk.bin"), str(out / "net.layer1.chmk.bin")]
    assert main(["verify", "--network", str(net), "--geometry", "2x2", "--weights", *bins]) == 0
    assert "PASS" in capsys.readouterr().out
    data = bytearray(open(bins[1], "rb").read())
    o_wx = 16 + 3 * 2 * 96 * 96  # Wx block of gate o, row of unit 0
    data[o_wx:o_wx + 96] = bytes([0x7F]) * 96
    open(bins[1], "wb").write(bytes(data))
    assert main(["verify", "--network", str(net), "--geometry", "2x2", "--weights", *bins]) == 1
    out_text = capsys.readouterr().out
    assert "FAIL: first mismatch at frame" in out_text and "layer 1, unit 0" in out_text
    assert "max |quantized - float|" in out_text


@pytest.mark.parametrize(
    "args,needle",
    [
        (["run", "--geometry", "5by5"], "geometry"),
        (["run", "--op-point", "3V"], "operating point"),
        (["run", "--cycle-param", "nonsense"], "key=value"),
        (["run", "--cycle-param", "warp=2"], "warp"),
        (["run", "--network", "missing.json"], "not found"),
        (["run", "--frames", "nofile.npy"], "not found"),
    ],
)
def test_input_errors_exit_2(args, needle, capsys):
    assert main(args) == 2
    assert needle in capsys.readouterr().err


def test_schema_error_names_field(net, capsys):
    doc = json.loads(net.read_text())
    del doc["layers"][1]["tensors"]["W_xo"]
    net.write_text(json.dumps(doc))
    assert main(["quantize", "--network", str(net)]) == 2
    assert "layers[1].tensors.W_xo" in capsys.readouterr().err


def test_table(capsys):
    assert main(["table"]) == 0
    out = capsys.readouterr().out
    assert "1833.75 mW" in out and "165.75 mW" in out and "611.25 mW" in out


def test_pure_backend_subprocess(net):
    env = {**os.environ, "CHIPMUNK_SIM_PURE": "1"}
    res = subprocess.run(
        [sys.executable, "-m", "chipmunk_sim.cli", "verify", "--network", str(net), "--geometry", "3x2", "--frames", "2"],
        capture_output=True, text=True, env=env,
    )
    assert res.returncode == 0, res.stderr
    assert "kernel backend numpy" in res.stdout
