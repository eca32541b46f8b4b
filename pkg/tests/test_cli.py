import csv
import json
import subprocess
import sys
import threading

import pytest

from enclaveflow.bench import generate_dataset
from enclaveflow.bench.cli import main as bench_main
from enclaveflow.cli import main, pipeline_main, router_main
from enclaveflow.pipeline import shipped_example_path
from enclaveflow.pipeline.launcher import free_ports
from enclaveflow.wire import Endpoint, Frame, connect_pull, connect_push


def local_spec(tmp_path, data_file, mode=None):
    text = shipped_example_path().read_text()
    for old, new in zip(range(5555, 5561), free_ports(6)):
        text = text.replace(f":{old}", f":{new}")
    text = text.replace("data_file = flights.csv", f"data_file = {data_file}")
    if mode:
        text = text.replace("mode = enclave", f"mode = {mode}")
    path = tmp_path / "local.pipeline"
    path.write_text(text)
    return path


def test_bench_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    code = bench_main(["run", "--input", str(tmp_path / "f.csv"), "--rows", "3000",
                       "--runner", "thread", "--mode", "encrypted", "--workers", "2",
                       "--out-dir", str(out), "--timeout", "60"])
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mode"] == "encrypted" and summary["carriers"] == 20
    rows = list(csv.DictReader(open(out / "result.csv")))
    assert len(rows) == 20 and set(rows[0]) == {"carrier", "delayed_count", "delay_sum",
                                                "mean_delay"}
    assert (out / "report.csv").read_text().startswith("interval,min,p25,p50,p75,max")
    assert any((out / "stats").glob("*.csv"))


def test_bench_sweep_chunk(tmp_path, capsys):
    csv_path = tmp_path / "sweep.csv"
    assert bench_main(["sweep-chunk", "--sizes", "4K,64K", "--total", str(1 << 20),
                       "--output", str(csv_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "chunk_bytes,direction,calls,crossing_time_s" and len(lines) == 5
    assert len(csv_path.read_text().splitlines()) == 5


def test_bench_generate_ingest_report_kernels(tmp_path, capsys):
    assert bench_main(["generate", str(tmp_path / "g.csv"), "--rows", "50"]) == 0
    assert len((tmp_path / "g.csv").read_text().splitlines()) == 51
    assert bench_main(["ingest", str(tmp_path / "nope.csv"), str(tmp_path / "o.csv")]) == 3
    assert bench_main(["report", str(tmp_path)]) == 3  # no stats files there
    assert bench_main(["kernels", "--rows", "500", "--repeat", "1"]) == 0
    assert "kernel,python_s,cython_s,speedup" in capsys.readouterr().out


def test_bench_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as info:
        bench_main(["sweep-chunk", "--sizes", "1M..4K"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        bench_main(["frobnicate"])
    assert info.value.code == 2


def test_pipeline_check(tmp_path, capsys):
    assert pipeline_main(["check", str(shipped_example_path())]) == 0
    assert "7 stages" in capsys.readouterr().out
    bad = tmp_path / "bad.pipeline"
    bad.write_text("[pipeline]\nmode = clear\n[src]\nrole = source\ncolour = red\n")
    assert pipeline_main(["check", str(bad)]) == 2
    assert pipeline_main(["check", str(tmp_path / "missing.pipeline")]) == 2


def test_pipeline_run(tmp_path, capsys):
    data = generate_dataset(tmp_path / "f.csv", 2000, 6, seed=2)
    spec = local_spec(tmp_path, data)
    code = pipeline_main(["run", str(spec), "--runner", "thread", "--workers", "mapper=2",
                          "--timeout", "60", "--stats-dir", str(tmp_path / "stats")])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["mode"] == "enclave"
    assert summary["stages"]["mapper"]["components"] == 2
    assert set(summary["result"]) <= {"AA", "AQ", "AS", "B6", "CO", "DL"}


def test_pipeline_run_errors(tmp_path, monkeypatch, capsys):
    data = generate_dataset(tmp_path / "f.csv", 100, seed=2)
    spec = local_spec(tmp_path, data)
    assert pipeline_main(["run", str(spec), "--workers", "ghost=2"]) == 2
    assert pipeline_main(["run", str(spec), "--workers", "mapper"]) == 2
    monkeypatch.delenv("ENCLAVEFLOW_KEY")
    assert pipeline_main(["run", str(spec), "--runner", "thread"]) == 3
    assert "ENCLAVEFLOW_KEY" in capsys.readouterr().err


def test_router_cli_forwards_and_reports(capsys):
    a, b = free_ports(2)
    result = {}

    def run():
        result["code"] = router_main(["--in", f"tcp://*:{a}", "--out", f"tcp://*:{b}",
                                      "--name", "r1", "--idle-timeout", "10"])

    t = threading.Thread(target=run)
    t.start()
    down = connect_pull([Endpoint("127.0.0.1", b)], timeout=5)
    up = connect_push([Endpoint("127.0.0.1", a)], timeout=5)
    for i in range(5):
        up.send(Frame(3, i, payload=b"x" * i))
    up.send(Frame.end_of_stream(3, 5))
    up.close()
    got = [down.recv(timeout=5) for _ in range(6)]
    t.join(10)
    down.close()
    assert result["code"] == 0
    assert [f.seq_no for f in got[:5]] == list(range(5)) and got[5].eos
    report = json.loads(capsys.readouterr().out)
    assert report["frames"] == 5 and report["eos_streams"] == [3]


def test_router_cli_same_endpoints():
    assert router_main(["--in", "tcp://*:7000", "--out", "tcp://*:7000"]) == 2


def test_top_level_dispatch(capsys):
    assert main([]) == 2
    assert main(["pipeline", "check", str(shipped_example_path())]) == 0
    proc = subprocess.run([sys.executable, "-m", "enclaveflow", "bench", "sweep-chunk",
                           "--model-only", "--sizes", "256,1K"], capture_output=True, text=True)
    assert proc.returncode == 0 and len(proc.stdout.splitlines()) == 5
