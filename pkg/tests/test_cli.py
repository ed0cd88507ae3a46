import json
import socket
import subprocess
import sys
import time
import urllib.request

import pytest

from hmi import bench, cli, plot
from hmi.transformer import load_model


@pytest.mark.parametrize("mode", ["hplm", "dedicated-swap", "shared", "compressed"])
def test_bench_run_writes_reports(tmp_path, mode, capsys):
    cfg = tmp_path / "b.toml"
    cfg.write_text("[bench]\nmax_batch_size = 8\n")
    out = tmp_path / "out"
    assert cli.bench_main(["run", "--mode", mode, "--tenants", "20", "--workload", "constant", "--config", str(cfg),
                           "--out", str(out), "--requests-per-tenant", "5", "--interval", "0.05"]) == 0
    rep = bench.read_report(out)
    assert rep.requests == 100 and rep.tenants == 20
    assert "throughput_rps" in capsys.readouterr().out


def test_bench_run_burst(tmp_path):
    assert cli.bench_main(["run", "--mode", "hplm", "--tenants", "100", "--workload", "burst",
                           "--out", str(tmp_path)]) == 0
    assert bench.read_report(tmp_path).requests == 12_500


def test_bench_rejects_unknown_mode(tmp_path):
    with pytest.raises(SystemExit):
        cli.bench_main(["run", "--mode", "magic", "--tenants", "1", "--out", str(tmp_path)])


def test_bench_ablation(tmp_path, capsys):
    assert cli.bench_main(["ablation", "--requests", "200", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert lines[1] == "variant,throughput_rps,speedup_vs_sync" and len(lines) == 7


def test_build_artifacts(tmp_path):
    assert cli.hmi_main(["build-artifacts", "--out", str(tmp_path), "--sentences", "20"]) == 0
    model = load_model(tmp_path / "model.hmi")
    root = plot.load(tmp_path / "root.plt")
    assert root.d == model.config.hidden_size and len(root) >= model.config.vocab_size


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _post(url, body):
    req = urllib.request.Request(url, json.dumps(body).encode(), {"Content-Type": "application/json"})
    with urllib.request.urlopen(req, timeout=10) as resp:
        return json.loads(resp.read())


def test_serve_end_to_end(tmp_path):
    cli.hmi_main(["build-artifacts", "--out", str(tmp_path), "--sentences", "20"])
    port = _free_port()
    proc = subprocess.Popen([sys.executable, "-m", "hmi", "serve", "--artifacts", str(tmp_path),
                             "--listen", f"127.0.0.1:{port}"], stderr=subprocess.PIPE)
    base = f"http://127.0.0.1:{port}"
    try:
        for _ in range(100):
            try:
                urllib.request.urlopen(base + "/state", timeout=1)
                break
            except OSError:
                time.sleep(0.1)
        iid = _post(base + "/manage", {"op": "create_instance", "tenant_id": "acme"})["instance_id"]
        out = _post(base + "/infer", {"tenant_id": "acme", "instance_id": iid, "tokens": [5, 6, 7, 8]})
        assert "label" in out["output"]
    finally:
        proc.send_signal(2)
        proc.wait(timeout=20)
    assert (tmp_path / "state" / "state.json").exists()
