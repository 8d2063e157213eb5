from fastapi.testclient import TestClient

from cnmcost.service import app
from cnmcost.target import emit_target, load_target, preset

client = TestClient(app)


def test_health_and_targets():
    assert client.get("/health").json() == {"status": "ok"}
    assert {"upmem", "hbmpim"} <= set(client.get("/targets").json()["presets"])
    r = client.get("/targets/upmem")
    assert r.status_code == 200 and load_target(r.text) == preset("upmem")
    assert client.get("/targets/nope").status_code == 404


def test_estimate_bench_and_preset():
    r = client.post("/estimate", json={"kernel": "bench:va:4096", "target": "preset:upmem"})
    assert r.status_code == 200
    body = r.json()
    assert body["kernel"] == "va" and body["cycles"] > 0 and body["converged"]


def test_estimate_with_texts_and_overrides():
    text = emit_target(preset("upmem"))
    base = client.post("/estimate", json={"kernel": "bench:gemv:16x64", "target_text": text}).json()
    fast = client.post("/estimate", json={"kernel": "bench:gemv:16x64", "target_text": text,
                                          "overrides": ["lut.MUL.i32.*=44"]}).json()
    assert fast["cycles"] < base["cycles"]


def test_estimate_with_mapping():
    m = "space (4096)\nmap a order=1 tuples=[(1);(4);(8);(128)]\n"
    body = client.post("/estimate", json={"kernel": "bench:va:4096", "target": "preset:upmem",
                                          "mapping_text": m}).json()
    assert body["maps"][0]["leaf_processes"] == 8


def test_validation_errors_are_422():
    r = client.post("/estimate", json={"kernel": "bench:va:4096", "target": "preset:upmem",
                                       "overrides": ["pipeline.nonsense=3"]})
    assert r.status_code == 422 and r.json()["kind"] == "TargetError"
    r = client.post("/estimate", json={"kernel": "bench:va:4096", "target": "preset:upmem",
                                       "mapping_text": "space (4096)\nmap a order=1 tuples=[(1);(1);(1);(8)]\n"})
    assert r.status_code == 422 and "tiled" in r.json()["detail"]
    r = client.post("/estimate", json={"kernel": "bench:va:4096", "target": "preset:upmem", "alpha": 3})
    assert r.status_code == 422


def test_server_does_not_read_paths():
    r = client.post("/estimate", json={"kernel": "/etc/passwd", "target": "preset:upmem"})
    assert r.status_code == 400


def test_explore_deterministic():
    req = {"kernel": "bench:va:65536", "target": "preset:upmem", "limit": 20, "seed": 3}
    a = client.post("/explore", json=req).json()
    b = client.post("/explore", json=req).json()
    assert a == b and len(a["rows"]) == 20
    lat = [r["latency_ms"] for r in a["rows"]]
    assert lat == sorted(lat)


def test_explore_rejects_bad_limit():
    assert client.post("/explore", json={"kernel": "bench:va:64", "target": "preset:upmem",
                                         "limit": 0}).status_code == 422


def test_codegen_and_ingest():
    r = client.post("/codegen", json={"kernel": "bench:va:64", "target": "preset:upmem"})
    assert r.status_code == 200 and "LOOP" in r.text
    r = client.post("/ingest", json={"asm": "move r0, 4\ntop:\nadd r1, r1, 1\nsub r0, r0, 1, nz, top\n"})
    body = r.json()
    assert "LOOP 4" in body["llvcnm"] and body["categories"]["arithmetic"] == 2
    r = client.post("/ingest", json={"asm": "jump r3"})
    assert r.status_code == 422 and "indirect" in r.json()["detail"]
