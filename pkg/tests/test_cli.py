import csv
import io
import json

import httpx
import pytest
from fastapi.testclient import TestClient

from cnmcost import cli
from cnmcost.bench import BenchSpec, build_benchmark
from cnmcost.cnmir import emit_kernel
from cnmcost.service import app
from cnmcost.target import emit_target, preset


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def files(tmp_path):
    k = tmp_path / "gemv.cnmir"
    k.write_text(emit_kernel(build_benchmark(BenchSpec("gemv", (192, 512)))))
    t = tmp_path / "upmem.cfg"
    t.write_text(emit_target(preset("upmem")))
    m = tmp_path / "m3.map"
    m.write_text("space (192,512)\nmap M3 order=3 tuples=[(1,4);(2,4);(8,1);(12,32)]\n")
    return tmp_path, str(k), str(t), str(m)


def test_targets(capsys):
    code, out, _ = run(capsys, "targets")
    assert code == 0 and "upmem" in out.split()
    code, out, _ = run(capsys, "targets", "--show", "hbmpim")
    assert code == 0 and 'mode = "VECTOR_PROC"' in out


def test_estimate_from_files(capsys, files):
    _, k, t, m = files
    code, out, _ = run(capsys, "estimate", "--kernel", k, "--target", t, "--mapping", m)
    rec = json.loads(out)
    assert code == 0 and rec["cycles"] > 0 and rec["maps"][0]["leaf_processes"] == 8
    assert {a["level_name"] for a in rec["accumulation"]} == {"rank", "dpu"}


def test_estimate_is_byte_identical(capsys, files):
    _, k, t, m = files
    a = run(capsys, "estimate", "--kernel", k, "--target", t, "--mapping", m)
    b = run(capsys, "estimate", "--kernel", k, "--target", t, "--mapping", m)
    assert a == b


def test_what_if(capsys):
    base = json.loads(run(capsys, "estimate", "--kernel", "bench:va:4096", "--target", "preset:upmem")[1])
    code, out, _ = run(capsys, "estimate", "--kernel", "bench:va:4096", "--target", "preset:upmem",
                       "--set", "pipeline.min_issue_distance=4", "--set", "pipeline.stages=4")
    assert code == 0 and json.loads(out)["cycles"] < base["cycles"]


def test_estimate_writes_out_file(capsys, files):
    tmp, *_ = files
    dest = tmp / "rec.json"
    code, out, _ = run(capsys, "estimate", "--kernel", "bench:va:64", "--target", "preset:upmem",
                       "--out", str(dest))
    assert code == 0 and out == "" and json.loads(dest.read_text())["kernel"] == "va"


def test_explore_csv(capsys):
    args = ("explore", "--kernel", "bench:va:65536", "--target", "preset:upmem", "--limit", "40",
            "--seed", "7")
    code, out, err = run(capsys, *args)
    assert code == 0
    assert out.endswith("\n") and "\r" not in out
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["explore-v1", "map_id", "mapping", "cycles", "latency_ms", "leaf_processes",
                       "converged", "accumulation", "status"]
    assert len(rows) == 41
    lat = [float(r[4]) for r in rows[1:]]
    assert lat == sorted(lat)
    assert "seed=7" in err and "explored 40 mappings" in err
    assert run(capsys, *args)[1] == out
    assert run(capsys, *args, "--jobs", "3")[1] == out
    assert run(capsys, *args[:-1], "8")[1] != out


def test_explore_row_count_capped_by_space(capsys):
    code, out, _ = run(capsys, "explore", "--kernel", "bench:va:12", "--target", "preset:upmem",
                       "--limit", "100000")
    from cnmcost.mapping import MappingSpace
    total = MappingSpace((12,), preset("upmem")).total
    assert code == 0 and len(out.splitlines()) == total + 1


def test_explore_caps(capsys):
    code, out, _ = run(capsys, "explore", "--kernel", "bench:va:4096", "--target", "preset:upmem",
                       "--cap", "rank=1", "--cap", "dpu=1", "--limit", "50")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and rows
    assert all("tuples=[(1);(1);" in r["mapping"] for r in rows)


def test_codegen(capsys, files):
    tmp, k, t, m = files
    dest = tmp / "leaf.llvcnm"
    code, _, _ = run(capsys, "codegen", "--kernel", k, "--target", t, "--mapping", m, "--out", str(dest))
    text = dest.read_text()
    assert code == 0 and text.startswith("LOOP 12\n") and "MUL.i32" in text


def test_ingest(capsys, tmp_path):
    src = tmp_path / "k.s"
    src.write_text("move r0, 8\ntop:\nlw r1, r2, 0\nadd r3, r3, r1\nsub r0, r0, 1, nz, top\n")
    code, out, err = run(capsys, "ingest", str(src))
    assert code == 0 and "LOOP 8" in out and "scratchpad=1" in err


@pytest.mark.parametrize("argv,expected", [
    (("estimate", "--kernel", "bench:va:64", "--target", "preset:nope"), 1),
    (("estimate", "--kernel", "bench:zz:64", "--target", "preset:upmem"), 1),
    (("estimate", "--kernel", "bench:va:64", "--target", "preset:upmem", "--set", "bogus"), 1),
    (("estimate", "--kernel", "bench:va:64", "--target", "preset:upmem", "--alpha", "2"), 1),
    (("estimate", "--kernel", "/no/such/file.cnmir", "--target", "preset:upmem"), 2),
    (("estimate", "--kernel", "bench:va:64", "--target", "/no/such.cfg"), 2),
    (("explore", "--kernel", "bench:va:64", "--target", "preset:upmem", "--limit", "0"), 1),
    (("explore", "--kernel", "bench:va:64", "--target", "preset:upmem", "--cap", "rank"), 1),
    (("ingest", "/no/such.s"), 2),
])
def test_exit_codes(capsys, argv, expected):
    code, _, err = run(capsys, *argv)
    assert code == expected and err.startswith("error:")


def test_strict_non_convergence(capsys, tmp_path):
    m = tmp_path / "t16.map"
    m.write_text("space (65536)\nmap a order=1 tuples=[(1);(1);(16);(4096)]\n")
    argv = ["estimate", "--kernel", "bench:va:65536", "--target", "preset:upmem", "--mapping", str(m),
            "--alpha", "1e-9", "--max-iters", "2"]
    code, out, _ = run(capsys, *argv)
    assert code == 0 and json.loads(out)["converged"] is False
    code, out, err = run(capsys, *argv, "--strict")
    assert code == 3 and "converge" in err


@pytest.fixture
def served(monkeypatch):
    client = TestClient(app)

    def post(url, json=None, timeout=None):
        return client.post(httpx.URL(url).path, json=json)

    monkeypatch.setattr(httpx, "post", post)


def test_server_mode_matches_local(capsys, served, files):
    _, k, t, m = files
    local = run(capsys, "estimate", "--kernel", k, "--target", t, "--mapping", m)
    remote = run(capsys, "estimate", "--kernel", k, "--target", t, "--mapping", m,
                 "--server", "http://cnm.test")
    assert local == remote
    args = ("explore", "--kernel", "bench:gemv:64x64", "--target", "preset:upmem", "--limit", "25")
    assert run(capsys, *args) == run(capsys, *args, "--server", "http://cnm.test")


def test_server_mode_errors(capsys, served):
    code, _, err = run(capsys, "estimate", "--kernel", "bench:va:64", "--target", "preset:upmem",
                       "--set", "pipeline.nope=1", "--server", "http://cnm.test")
    assert code == 1 and "nope" in err


def test_unreachable_server_is_io_error(capsys):
    code, _, err = run(capsys, "estimate", "--kernel", "bench:va:64", "--target", "preset:upmem",
                       "--server", "http://127.0.0.1:9")
    assert code == 2
