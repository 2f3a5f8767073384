# test_cli.py
import json
import os

import numpy as np
import pytest

from conftest import build_mlp, build_regression
from graphlower.evaluator import evaluate
from graphlower.model_io import load_model, save_model
from graphlower.node_table import NodeKind
from graphlower.pipeline import BUNDLE_FILES
from main import main


@pytest.fixture
def mlp_model(tmp_path, rng):
    m, f = build_mlp(rng)
    path = tmp_path / "model.json"
    save_model(m, str(path), str(tmp_path / "model.bin"))
    return f, str(path)


def _write_input(path, rng, shape=(8, 4)):
    x = rng.uniform(-1, 1, shape).astype(np.float32)
    path.write_bytes(x.tobytes())
    return x


def _sha(out):
    return [line.split()[-1] for line in out.splitlines() if "sha256" in line]


def test_compile_writes_a_bundle(tmp_path, mlp_model, capsys):
    f, model = mlp_model
    assert main(["compile", model, "--dump-ir", "--dump-graph", "dot"]) == 0
    bundle = tmp_path / "model.bundle"
    for name in BUNDLE_FILES + ("graph.dot",):
        assert (bundle / name).exists()
    out = capsys.readouterr().out
    assert "declare {" in out and "program {" in out
    assert "compiled main" in out
    assert (bundle / "graph.dot").read_text().startswith("digraph")


def test_run_matches_the_evaluator(tmp_path, mlp_model, rng, capsys):
    f, model = mlp_model
    x = _write_input(tmp_path / "in.bin", rng)
    assert main(["compile", model]) == 0
    bundle = str(tmp_path / "model.bundle")
    out_path = tmp_path / "out.bin"
    assert main(["run", bundle, "--input", str(tmp_path / "in.bin"), "--output", str(out_path),
                 "--repeat", "3"]) == 0
    got = np.frombuffer(out_path.read_bytes(), dtype="<f4").reshape(8, 3)
    np.testing.assert_allclose(got, evaluate(f, {"x": x})["out"], rtol=1e-5, atol=1e-6)
    assert main(["run", model, "--input", str(tmp_path / "in.bin")]) == 0
    digests = _sha(capsys.readouterr().out)
    assert len(digests) == 2 and digests[0] == digests[1]


def test_profile_then_quantize(tmp_path, mlp_model, rng, capsys):
    f, model = mlp_model
    data = tmp_path / "calibration"
    data.mkdir()
    for i in range(20):
        _write_input(data / f"{i:03d}.bin", rng)
    assert main(["profile", model, "--data", str(data), "--workers", "2"]) == 0
    profile = tmp_path / "model.profile"
    assert profile.exists()
    assert main(["quantize", model, "--profile", str(profile)]) == 0
    quantized = load_model(str(tmp_path / "model.q.json"), str(tmp_path / "model.q.bin"))
    (q,) = quantized.functions.values()
    assert q.count(NodeKind.QUANTIZE) > 0
    x = _write_input(tmp_path / "in.bin", rng)
    out_path = tmp_path / "out.bin"
    assert main(["run", str(tmp_path / "model.q.json"), "--input", str(tmp_path / "in.bin"),
                 "--output", str(out_path)]) == 0
    got = np.frombuffer(out_path.read_bytes(), dtype="<f4").reshape(8, 3)
    assert float(np.mean(np.abs(got - evaluate(f, {"x": x})["out"]))) < 0.05


def test_serve_writes_outputs_and_an_event_log(tmp_path, mlp_model, rng, capsys):
    f, model = mlp_model
    devices = tmp_path / "devices.json"
    devices.write_text(json.dumps({"devices": [
        {"device_id": f"d{i}", "memory_capacity": 1 << 20, "throughput": 1e9, "bandwidth": 1e9}
        for i in range(2)]}))
    inputs = [_write_input(tmp_path / f"in{i}.bin", rng) for i in range(3)]
    requests = tmp_path / "requests.json"
    requests.write_text(json.dumps([{"id": f"q{i}", "input": f"in{i}.bin"} for i in range(3)]))
    assert main(["serve", model, "--devices", str(devices), "--requests", str(requests)]) == 0
    out_dir = tmp_path / "requests.outputs"
    for i, x in enumerate(inputs):
        got = np.frombuffer((out_dir / f"q{i}.bin").read_bytes(), dtype="<f4").reshape(8, 3)
        np.testing.assert_allclose(got, evaluate(f, {"x": x})["out"], rtol=1e-5, atol=1e-6)
    log = (out_dir / "events.log").read_text().splitlines()
    assert sum(1 for line in log if line.split()[3] == "finish") == 3
    assert len(_sha(capsys.readouterr().out)) == 3


def test_training_compile(tmp_path):
    m, f = build_regression()
    model = tmp_path / "reg.json"
    save_model(m, str(model), str(tmp_path / "reg.bin"))
    assert main(["compile", str(model), "--train", "--trainables", "A", "--learning-rate", "0.1"]) == 0
    assert os.path.isdir(tmp_path / "reg.bundle")
    assert main(["compile", str(model), "--train"]) == 1


def test_errors_exit_with_status_one(tmp_path, mlp_model, capsys):
    f, model = mlp_model
    assert main(["compile", str(tmp_path / "absent.json")]) == 1
    (tmp_path / "short.bin").write_bytes(b"\x00" * 12)
    assert main(["run", model, "--input", str(tmp_path / "short.bin")]) == 1
    assert main(["compile", model, "--passes", "dce,nonsense"]) == 1
    assert main(["profile", model, "--data", str(tmp_path / "nothing")]) == 1
    assert "error:" in capsys.readouterr().err
