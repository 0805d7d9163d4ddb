import os
import subprocess
import sys

import numpy as np
import pytest

from gnnserve.cli import run


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("data") / "ds")
    assert run(["gen-graph", "--out", path, "--n", "400", "--avg-degree", "8",
                "--features", "10", "--seed", "3"]) == 0
    assert run(["precompute", "--dataset", path, "--model", "sage",
                "--layers", "2", "--hidden", "8", "--seed", "7"]) == 0
    return path


def test_unknown_command_usage_error():
    with pytest.raises(SystemExit) as exc:
        run(["frobnicate"])
    assert exc.value.code == 2


def test_unknown_flag_usage_error():
    with pytest.raises(SystemExit) as exc:
        run(["gen-graph", "--bogus", "1"])
    assert exc.value.code == 2


def test_runtime_error_exit_code():
    proc = subprocess.run(
        [sys.executable, "-m", "gnnserve.cli", "serve", "--dataset", "/nonexistent-dir"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 1
    assert proc.stderr.strip().startswith("error:")
    assert len(proc.stderr.strip().splitlines()) == 1


def test_partition_command(dataset_dir, tmp_path):
    out = str(tmp_path / "parts.csv")
    assert run(["partition", "--dataset", dataset_dir, "--p", "3", "--seed", "1", "--out", out]) == 0
    lines = open(out).read().strip().splitlines()
    assert lines[0] == "partition,owned_nodes,local_edges"
    assert len(lines) == 4
    owned = sum(int(l.split(",")[1]) for l in lines[1:])
    assert owned == 400


def test_verify_degenerate_world():
    assert run(["verify", "--suite", "cgp-equivalence", "--p", "1"]) == 0


def test_serve_strategies_agree_at_full_budget(dataset_dir, tmp_path):
    out1 = str(tmp_path / "cgp")
    out2 = str(tmp_path / "full")
    assert run(["serve", "--dataset", dataset_dir, "--strategy", "srpe-cgp", "--gamma", "1.0",
                "--p", "2", "--batch", "8", "--seed", "5", "--out", out1]) == 0
    assert run(["serve", "--dataset", dataset_dir, "--strategy", "full",
                "--batch", "8", "--seed", "5", "--out", out2]) == 0
    a = np.fromfile(os.path.join(out1, "embeddings.bin"), dtype="<f4")
    b = np.fromfile(os.path.join(out2, "embeddings.bin"), dtype="<f4")
    assert a.shape == b.shape
    assert np.max(np.abs(a - b)) <= 1e-5


def test_serve_saved_request_roundtrip(dataset_dir, tmp_path):
    req_dir = str(tmp_path / "req")
    out1 = str(tmp_path / "o1")
    out2 = str(tmp_path / "o2")
    assert run(["serve", "--dataset", dataset_dir, "--strategy", "srpe", "--gamma", "0.2",
                "--batch", "6", "--seed", "9", "--out", out1, "--save-request", req_dir]) == 0
    assert run(["serve", "--dataset", dataset_dir, "--strategy", "srpe", "--gamma", "0.2",
                "--request", req_dir, "--out", out2]) == 0
    a = np.fromfile(os.path.join(out1, "embeddings.bin"), dtype="<f4")
    b = np.fromfile(os.path.join(out2, "embeddings.bin"), dtype="<f4")
    assert np.array_equal(a, b)


def test_bench_policy_table_shape(dataset_dir, tmp_path):
    out = str(tmp_path / "policy.csv")
    assert run(["bench-policy", "--dataset", dataset_dir, "--policies", "ratio,is,random,oracle",
                "--budgets", "0,0.05,0.1,0.2", "--batch", "8", "--num-batches", "2",
                "--seed", "3", "--out", out]) == 0
    lines = open(out).read().strip().splitlines()
    assert lines[0] == "policy,budget,mean_residual_error"
    assert len(lines) == 1 + 4 * 4


def test_bench_latency_rows(dataset_dir, tmp_path):
    out = str(tmp_path / "lat.csv")
    assert run(["bench-latency", "--dataset", dataset_dir, "--batch", "6", "--p", "2",
                "--gamma", "0.2", "--requests", "2", "--seed", "3",
                "--fanouts", "8,4", "--out", out]) == 0
    lines = open(out).read().strip().splitlines()
    assert len(lines) == 1 + 2 * 4  # header + 2 requests x 4 strategies
    from gnnserve.runtime import METRICS_HEADER

    assert lines[0] == METRICS_HEADER


def test_bench_policy_is_deterministic(dataset_dir, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / f"pol_{name}.csv")
        assert run(["bench-policy", "--dataset", dataset_dir, "--policies", "ratio,random",
                    "--budgets", "0.1,0.2", "--batch", "8", "--num-batches", "2",
                    "--seed", "3", "--out", out]) == 0
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1]


def test_bench_throughput_report(dataset_dir, tmp_path):
    out = str(tmp_path / "tp.csv")
    assert run(["bench-throughput", "--dataset", dataset_dir, "--strategy", "srpe",
                "--gamma", "0.1", "--batch", "6", "--rate", "30", "--duration-s", "0.4",
                "--seed", "3", "--out", out]) == 0
    lines = open(out).read().strip().splitlines()
    assert lines[0].startswith("offered_rate,achieved_rate")
    fields = lines[1].split(",")
    assert float(fields[0]) == 30.0
    assert int(fields[2]) >= 1
