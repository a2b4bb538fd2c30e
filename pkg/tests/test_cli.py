import json
import subprocess
import sys

import numpy as np
import pytest

from mixprec.cli import main
from mixprec.core import Tensor, tensor_io_read, tensor_io_write
from mixprec.packer import PackedWeights
from mixprec.quant import QuantSpec, KvCache, quantize_kv, save_kv_cache


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write(path, arr, dtype="f16"):
    tensor_io_write(Tensor.from_array(arr, dtype), path)
    return path


@pytest.fixture
def weights(tmp_path, rng):
    return write(tmp_path / "w.bin", rng.standard_normal((128, 128)).astype(np.float16))


def test_pack_unpack_round_trip(capsys, tmp_path, weights):
    code, out, _ = run(capsys, "pack", "--in", weights, "--bits", 4, "--group", 64,
                       "--out", tmp_path / "w.mxp")
    assert code == 0
    rep = json.loads(out)
    assert rep["schema_version"] == 1 and rep["verify"]["transactions"] == 1
    assert run(capsys, "verify", "--in", tmp_path / "w.mxp", "--all")[0] == 0
    assert run(capsys, "unpack", "--in", tmp_path / "w.mxp", "--out", tmp_path / "d.bin")[0] == 0
    deq = tensor_io_read(tmp_path / "d.bin").data
    src = tensor_io_read(weights).data
    assert deq.shape == (128, 128)
    assert np.abs(deq.astype(np.float32) - src).max() < 0.5


def test_pack_usage_errors(capsys, tmp_path, weights):
    code, _, err = run(capsys, "pack", "--in", weights, "--bits", 3, "--out", tmp_path / "x")
    assert code == 2 and "bit width" in err
    code, _, err = run(capsys, "pack", "--in", weights, "--arch", "sm12", "--out", tmp_path / "x")
    assert code == 2 and "sm80" in err
    code, _, _ = run(capsys, "pack", "--in", tmp_path / "missing.bin", "--out", tmp_path / "x")
    assert code == 2
    vec = write(tmp_path / "v.bin", np.zeros(8, np.float16))
    assert run(capsys, "pack", "--in", vec, "--out", tmp_path / "x")[0] == 2


def test_arch_env_default(capsys, tmp_path, weights, monkeypatch):
    monkeypatch.setenv("MIXPREC_ARCH", "sm90")
    assert run(capsys, "pack", "--in", weights, "--out", tmp_path / "w.mxp")[0] == 0
    assert PackedWeights.load(tmp_path / "w.mxp").arch.name == "sm90"


@pytest.mark.parametrize("bits", [4, 8])
def test_gemm_check(capsys, tmp_path, bits):
    code, out, _ = run(capsys, "gemm", "--m", 5, "--n", 40, "--k", 96, "--bits", bits,
                       "--group", 32, "--check", "--out", tmp_path / "o.bin",
                       "--schedule", tmp_path / "s.json")
    assert code == 0 and json.loads(out)["check"] == "pass"
    assert tensor_io_read(tmp_path / "o.bin").shape == (5, 40)
    assert json.loads((tmp_path / "s.json").read_text())["schema_version"] == 1


def test_gemm_corrupted_file_reports_mismatch(capsys, tmp_path, weights, rng):
    assert run(capsys, "pack", "--in", weights, "--out", tmp_path / "w.mxp")[0] == 0
    run(capsys, "unpack", "--in", tmp_path / "w.mxp", "--out", tmp_path / "ref.bin")
    a = write(tmp_path / "a.bin", rng.standard_normal((4, 128)).astype(np.float16))
    args = ["gemm", "--a", a, "--w", tmp_path / "w.mxp", "--weights-ref", tmp_path / "ref.bin",
            "--check"]
    assert run(capsys, *args)[0] == 0
    p = PackedWeights.load(tmp_path / "w.mxp")
    p.words[0] ^= np.uint32(0x0F0F)
    p.save(tmp_path / "w.mxp")
    code, _, err = run(capsys, *args)
    assert code == 4 and "first mismatch at index" in err


def test_attn_check(capsys, tmp_path):
    code, out, _ = run(capsys, "attn", "--kv-bits", 8, "--tokens", 130, "--check",
                       "--out", tmp_path / "o.bin")
    rep = json.loads(out)
    assert code == 0 and rep["check"] == "pass" and rep["macro_tiles"] == 3


def test_attn_from_files(capsys, tmp_path, rng):
    spec = QuantSpec(kv_bits=4, group_size=64)
    cache = quantize_kv(rng.standard_normal((2, 20, 64)), rng.standard_normal((2, 20, 64)),
                        KvCache.empty(2, 64, 20, spec))
    save_kv_cache(cache, tmp_path / "kv")
    q = write(tmp_path / "q.bin", rng.standard_normal((2, 64)).astype(np.float16))
    assert run(capsys, "attn", "--q", q, "--kv", tmp_path / "kv", "--check")[0] == 0
    assert run(capsys, "attn", "--q", q)[0] == 2


def test_sim_reports(capsys, tmp_path):
    code, out, _ = run(capsys, "sim", "--workload", "gemm", "--m", 16, "--n", 4096, "--k", 4096,
                       "--depth", 3, "--report", tmp_path / "r.json")
    rep = json.loads(out)
    assert code == 0 and "cycle_ratio" in rep and "instr_ratio" in rep
    assert json.loads((tmp_path / "r.json").read_text()) == rep
    code, out, _ = run(capsys, "sim", "--workload", "attn", "--tokens", 130, "--head-dim", 128,
                       "--kv-bits", 8)
    rep = json.loads(out)
    assert code == 0 and rep["macro_tiles"] == 3 and rep["k_slices"] == 16


def test_sim_usage_errors(capsys, tmp_path):
    assert run(capsys, "sim", "--workload", "gemm", "--depth", 0)[0] == 2
    assert run(capsys, "sim", "--workload", "gemm", "--k", 0)[0] == 2
    assert run(capsys, "sim", "--workload", "attn", "--head-dim", 36)[0] == 2
    bad = tmp_path / "lat.json"
    bad.write_text('{"mma": -1}')
    assert run(capsys, "sim", "--workload", "gemm", "--latencies", bad)[0] == 2


def test_sim_latency_file(capsys, tmp_path):
    lat = tmp_path / "lat.json"
    lat.write_text('{"i2f": 0, "fma": 0}')
    code, out, _ = run(capsys, "sim", "--workload", "gemm", "--latencies", lat)
    assert code == 0 and json.loads(out)["cycle_ratio"] == 1.0


@pytest.mark.parametrize("scenario, key, value", [
    ("aligned", "transactions", 1), ("misaligned", "transactions", 2),
    ("column-tile", "conflict_degree", 8), ("column-walk", "conflict_degree", 32),
    ("column-tile-swizzled", "conflict_degree", 1)])
def test_analyze_scenarios(capsys, scenario, key, value):
    code, out, _ = run(capsys, "analyze", "--scenario", scenario)
    assert code == 0 and json.loads(out)[key] == value


def test_analyze_trace_file(capsys, tmp_path):
    from mixprec.memmodel import contiguous_warp_trace
    path = tmp_path / "t.json"
    path.write_text(json.dumps(contiguous_warp_trace(0).to_dict()))
    assert run(capsys, "analyze", "--trace", path)[0] == 0
    path.write_text("{}")
    assert run(capsys, "analyze", "--trace", path)[0] == 2


def test_deterministic_output(capsys, tmp_path):
    outs = []
    for i in range(2):
        run(capsys, "gemm", "--seed", 9, "--m", 3, "--n", 24, "--k", 64, "--out", tmp_path / f"{i}.bin")
        outs.append((tmp_path / f"{i}.bin").read_bytes())
    assert outs[0] == outs[1]
    a = run(capsys, "sim", "--workload", "attn")[1]
    assert a == run(capsys, "sim", "--workload", "attn")[1]


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "mixprec", "sim", "--workload", "gemm", "--k", "64"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["k_tiles"] == 4
