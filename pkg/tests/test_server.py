import io
import json
import threading
import time
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from dragsplat import gaussians as G
from dragsplat.config import AppConfig
from dragsplat.scenes import random_cloud
from dragsplat.server import create_app
from dragsplat.session import SessionStore


def ply_bytes(cloud) -> bytes:
    import tempfile

    with tempfile.NamedTemporaryFile(suffix=".ply") as f:
        G.save_ply(cloud, f.name)
        return Path(f.name).read_bytes()


@pytest.fixture()
def client(tmp_path):
    cfg = AppConfig()
    cfg.render.width = cfg.render.height = 16
    cfg.lora.steps = 2
    cfg.drag.max_iters = 1
    cfg.refit.iterations = 2
    cfg.server.checkpoint = str(Path(__file__).parent / ".cache" / "tiny_net_v1.ckpt")
    store = SessionStore(tmp_path / "data", cfg)
    app = create_app(store)
    with TestClient(app) as c:
        c.store = store
        yield c


def make_session(client, n=40):
    sid = client.post("/v1/sessions").json()["id"]
    cloud = random_cloud(17)
    r = client.post(f"/v1/sessions/{sid}/ply", content=ply_bytes(cloud))
    assert r.status_code == 200
    assert r.json()["count"] == cloud.count
    r = client.post(f"/v1/sessions/{sid}/cameras", json={"auto": {"width": 16, "height": 16}})
    assert r.status_code == 200 and len(r.json()["cameras"]) == 4
    return sid, cloud


def test_unknown_session_404(client):
    assert client.get("/v1/sessions/doesnotexist/status").status_code == 404


def test_upload_count_and_render(client):
    sid, cloud = make_session(client)
    r = client.get(f"/v1/sessions/{sid}/render", params={"view": 1})
    assert r.status_code == 200 and r.headers["content-type"] == "image/png"
    from PIL import Image

    img = Image.open(io.BytesIO(r.content))
    assert img.size == (16, 16)
    # buffers sidecar for the UI
    r = client.get(f"/v1/sessions/{sid}/render", params={"view": 0, "buffers": 1})
    doc = r.json()
    assert len(doc["ids"]) == 16 and len(doc["depth"]) == 16
    r = client.get(f"/v1/sessions/{sid}/render", params={"view": 9})
    assert r.status_code == 422


def test_invalid_ply_is_422(client):
    sid = client.post("/v1/sessions").json()["id"]
    r = client.post(f"/v1/sessions/{sid}/ply", content=b"not a ply")
    assert r.status_code == 422


def test_picks_snap_and_project(client):
    sid, cloud = make_session(client)
    start = cloud.mu[3].tolist()
    end = (cloud.mu[3] + [0.2, 0.0, 0.0]).tolist()
    r = client.post(f"/v1/sessions/{sid}/picks", json={"starts": [start], "ends": [end]})
    assert r.status_code == 200
    doc = r.json()
    assert len(doc["projections"]) == 4
    for p in doc["projections"]:
        assert len(p["handles"]) == 1 and len(p["targets"]) == 1
    # bad pick: not a Gaussian center
    r = client.post(f"/v1/sessions/{sid}/picks", json={"starts": [[9, 9, 9]], "ends": [end]})
    assert r.status_code == 422


def test_mask_indices_and_stroke(client):
    sid, cloud = make_session(client)
    r = client.post(f"/v1/sessions/{sid}/mask", json={"indices": [1, 2, 2, 3]})
    assert r.status_code == 200 and r.json()["count"] == 3
    # additive stroke over the whole image collects every visible center
    r = client.post(
        f"/v1/sessions/{sid}/mask",
        json={"stroke": {"view": 0, "u": 8, "v": 8, "radius": 100, "mode": "add"}},
    )
    n_all = r.json()["count"]
    assert n_all >= cloud.count - 2
    # erase brings it back down
    r = client.post(
        f"/v1/sessions/{sid}/mask",
        json={"stroke": {"view": 0, "u": 8, "v": 8, "radius": 100, "mode": "erase"}},
    )
    assert r.json()["count"] <= 3
    r = client.post(f"/v1/sessions/{sid}/mask", json={})
    assert r.status_code == 422


def test_job_ordering_409(client):
    sid, cloud = make_session(client)
    r = client.post(f"/v1/sessions/{sid}/jobs/drag")
    assert r.status_code == 409 and r.json()["error"] in ("picks_required", "lora_required")
    start = cloud.mu[0].tolist()
    client.post(f"/v1/sessions/{sid}/picks", json={"starts": [start], "ends": [[0.3, 0.3, 0.3]]})
    r = client.post(f"/v1/sessions/{sid}/jobs/drag")
    assert r.status_code == 409 and r.json()["error"] == "lora_required"
    r = client.post(f"/v1/sessions/{sid}/jobs/refit")
    assert r.status_code == 409 and r.json()["error"] == "drag_required"
    r = client.post(f"/v1/sessions/{sid}/jobs/bogus")
    assert r.status_code == 422


def wait_job(client, sid, job, timeout=240.0):
    t0 = time.time()
    while time.time() - t0 < timeout:
        doc = client.get(f"/v1/sessions/{sid}/status").json()
        state = doc["jobs"][job]["state"]
        if state in ("done", "failed"):
            return doc
        time.sleep(0.2)
    raise TimeoutError(f"job {job} did not finish")


def test_full_pipeline_over_http(client):
    sid, cloud = make_session(client)
    start = cloud.mu[5].tolist()
    end = (cloud.mu[5] + [0.15, 0.0, 0.1]).tolist()
    client.post(f"/v1/sessions/{sid}/picks", json={"starts": [start], "ends": [end]})
    client.post(f"/v1/sessions/{sid}/mask", json={"indices": [5]})

    r = client.post(f"/v1/sessions/{sid}/jobs/lora")
    assert r.status_code == 200
    doc = wait_job(client, sid, "lora")
    assert doc["jobs"]["lora"]["state"] == "done", doc["jobs"]["lora"]

    r = client.post(f"/v1/sessions/{sid}/jobs/drag")
    assert r.status_code == 200
    doc = wait_job(client, sid, "drag")
    assert doc["jobs"]["drag"]["state"] == "done", doc["jobs"]["drag"]
    assert "edited_view0" in doc["artifacts"]
    art = doc["artifacts"]["edited_view0"]
    r = client.get(f"/v1/sessions/{sid}/artifacts/{art}")
    assert r.status_code == 200 and r.content[:4] == b"\x89PNG"

    r = client.post(f"/v1/sessions/{sid}/jobs/refit")
    assert r.status_code == 200
    doc = wait_job(client, sid, "refit")
    assert doc["jobs"]["refit"]["state"] == "done", doc["jobs"]["refit"]

    r = client.get(f"/v1/sessions/{sid}/export")
    assert r.status_code == 200
    assert r.content[:4] == b"ply\n"

    # state machine: never skipped states, telemetry accumulated
    assert doc["telemetry_len"] > 0


def test_concurrent_starts_one_wins(client):
    sid, cloud = make_session(client)
    results = []
    barrier = threading.Barrier(2)

    def hit():
        barrier.wait()
        results.append(client.post(f"/v1/sessions/{sid}/jobs/lora").status_code)

    threads = [threading.Thread(target=hit) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(results) == [200, 409]
    wait_job(client, sid, "lora")


def test_telemetry_websocket_stream(client):
    sid, cloud = make_session(client)
    client.post(f"/v1/sessions/{sid}/jobs/lora")
    wait_job(client, sid, "lora")
    with client.websocket_connect(f"/v1/sessions/{sid}/telemetry?since=0") as ws:
        msg = json.loads(ws.receive_text())
        assert msg["seq"] == 0
        # resubscribe from a later sequence number gives no duplicates
    status = client.get(f"/v1/sessions/{sid}/status").json()
    total = status["telemetry_len"]
    with client.websocket_connect(f"/v1/sessions/{sid}/telemetry?since={total - 1}") as ws:
        msg = json.loads(ws.receive_text())
        assert msg["seq"] == total - 1


def test_restart_recovers_sessions(tmp_path):
    cfg = AppConfig()
    cfg.render.width = cfg.render.height = 16
    cfg.server.checkpoint = str(Path(__file__).parent / ".cache" / "tiny_net_v1.ckpt")
    store = SessionStore(tmp_path / "data", cfg)
    app = create_app(store)
    with TestClient(app) as c:
        sid = c.post("/v1/sessions").json()["id"]
        cloud = random_cloud(19)
        c.post(f"/v1/sessions/{sid}/ply", content=ply_bytes(cloud))
        c.post(f"/v1/sessions/{sid}/cameras", json={"auto": {"width": 16, "height": 16}})
        c.post(f"/v1/sessions/{sid}/mask", json={"indices": [0, 1]})
    store2 = SessionStore(tmp_path / "data", cfg)
    app2 = create_app(store2)
    with TestClient(app2) as c2:
        doc = c2.get(f"/v1/sessions/{sid}/status").json()
        assert doc["cloud_count"] == cloud.count
        assert doc["mask"] == [0, 1]
        r = c2.get(f"/v1/sessions/{sid}/render", params={"view": 0})
        assert r.status_code == 200
