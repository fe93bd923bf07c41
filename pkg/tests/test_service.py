import json
import os
import time

import numpy as np
import pytest

from surgimap.corpus import write_hsaf
from surgimap.service import MappingService, ServiceConfig, ServiceError, create_app
from surgimap.workflow import validate_timeline


def hsaf_bytes(rows, dim=32, seed=0):
    import io
    import tempfile

    rng = np.random.default_rng(seed)
    with tempfile.NamedTemporaryFile(suffix=".hsaf", delete=False) as fh:
        path = fh.name
    write_hsaf(path, rng.normal(size=(rows, dim)))
    with open(path, "rb") as fh:
        data = fh.read()
    os.unlink(path)
    return data


@pytest.fixture()
def service(trained, tmp_path):
    config = ServiceConfig(
        store_dir=str(tmp_path / "store"),
        checkpoint_path=str(trained["checkpoint"]),
        vocab_path=str(trained["vocab_path"]),
        workers=1,
    )
    svc = MappingService(config)
    yield svc
    svc.stop_workers()


def wait_for(predicate, timeout=60.0, interval=0.02):
    deadline = time.time() + timeout
    while time.time() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise TimeoutError("condition not reached")


# ------------------------------------------------------------------ videos


def test_register_video_and_dedup(service):
    data = hsaf_bytes(40)
    meta1 = service.register_video(data, title="case A")
    meta2 = service.register_video(data, title="ignored on dedup")
    assert meta1["video_id"] == meta2["video_id"]
    assert meta1["duration_s"] == 40
    assert len(service.list_videos()) == 1


def test_register_video_rejects_bad_magic(service):
    with pytest.raises(ServiceError, match="HSAF"):
        service.register_video(b"JUNKJUNKJUNK")


def test_list_videos_multiple(service):
    service.register_video(hsaf_bytes(30, seed=1))
    service.register_video(hsaf_bytes(35, seed=2))
    listed = service.list_videos()
    assert len(listed) == 2
    assert all({"video_id", "duration_s", "dim"} <= set(m) for m in listed)


# -------------------------------------------------------------------- jobs


def test_job_lifecycle(service):
    meta = service.register_video(hsaf_bytes(60, seed=3))
    job = service.create_job(meta["video_id"], task_id=3)
    assert job["status"] == "queued"
    service.start_workers()
    done = wait_for(lambda: (service.job_status(job["job_id"]) or {})
                    .get("status") in ("done", "failed")
                    and service.job_status(job["job_id"]))
    assert done["status"] == "done"
    assert done["result_path"]
    data = service.get_timeline_bytes(meta["video_id"], 3)
    timeline = json.loads(data)
    assert validate_timeline(timeline) == []


def test_create_job_unknown_video(service):
    with pytest.raises(KeyError):
        service.create_job("missing", task_id=3)


def test_create_job_invalid_request(service):
    meta = service.register_video(hsaf_bytes(30, seed=4))
    with pytest.raises(ServiceError):
        service.create_job(meta["video_id"], task_id=3, fine_window_s=9.0)
    with pytest.raises(ServiceError):
        service.create_job(meta["video_id"], task_id=77)


def test_job_idempotency_key(service):
    meta = service.register_video(hsaf_bytes(30, seed=5))
    a = service.create_job(meta["video_id"], task_id=3, idempotency_key="k1")
    b = service.create_job(meta["video_id"], task_id=3, idempotency_key="k1")
    assert a["job_id"] == b["job_id"]


def test_job_status_unknown(service):
    assert service.job_status("nope") is None


# ---------------------------------------------------------- crash recovery


def test_recovery_requeues_running_jobs(trained, tmp_path):
    config = ServiceConfig(
        store_dir=str(tmp_path / "store"),
        checkpoint_path=str(trained["checkpoint"]),
        vocab_path=str(trained["vocab_path"]),
        workers=1,
    )
    svc = MappingService(config)
    meta = svc.register_video(hsaf_bytes(45, seed=6))
    job = svc.create_job(meta["video_id"], task_id=3)
    # simulate a crash mid-execution: job persisted as running, process gone
    path = svc._job_path(job["job_id"])
    stored = json.loads(open(path).read())
    stored["status"] = "running"
    with open(path, "w") as fh:
        json.dump(stored, fh)

    svc2 = MappingService(config)
    recovered = svc2.job_status(job["job_id"])
    assert recovered["status"] == "queued"  # never stuck in running
    svc2.start_workers()
    done = wait_for(lambda: (svc2.job_status(job["job_id"]) or {})
                    .get("status") in ("done", "failed")
                    and svc2.job_status(job["job_id"]))
    assert done["status"] == "done"
    svc2.stop_workers()


def test_done_timeline_byte_stable_across_reruns(service):
    meta = service.register_video(hsaf_bytes(60, seed=7))
    service.start_workers()
    job = service.create_job(meta["video_id"], task_id=3)
    wait_for(lambda: service.job_status(job["job_id"])["status"] == "done")
    first = service.get_timeline_bytes(meta["video_id"], 3)
    # re-executing the same mapping commits identical bytes
    job2 = service.create_job(meta["video_id"], task_id=3)
    wait_for(lambda: service.job_status(job2["job_id"])["status"] == "done")
    assert service.get_timeline_bytes(meta["video_id"], 3) == first


# ----------------------------------------------------------------- summary


def _write_timeline(store_dir, video, task, summary):
    d = os.path.join(store_dir, "timelines", video)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, f"{task}.json"), "w") as fh:
        json.dump({"video_id": video, "segments": [], "summary": summary}, fh)


def test_summary_aggregates_proficiency(service):
    # 0.6 over 10 segments and 0.8 over 10 segments -> 0.7 overall
    _write_timeline(service.config.store_dir, "va", 3, {
        "tasks": {}, "high_proficiency_fraction": 0.6,
        "proficiency_segments": 10,
    })
    _write_timeline(service.config.store_dir, "vb", 3, {
        "tasks": {}, "high_proficiency_fraction": 0.8,
        "proficiency_segments": 10,
    })
    summary = service.get_summary()
    assert summary["videos"] == 2
    assert summary["high_proficiency_fraction"] == pytest.approx(0.7)


def test_summary_empty(service):
    summary = service.get_summary()
    assert summary["videos"] == 0
    assert summary["high_proficiency_fraction"] is None


# -------------------------------------------------------------------- HTTP


@pytest.fixture()
def client(service):
    from fastapi.testclient import TestClient

    service.start_workers()
    app = create_app(service)
    with TestClient(app) as client:
        yield client


def test_http_video_endpoints(client):
    data = hsaf_bytes(40, seed=8)
    resp = client.post("/videos?title=demo", content=data)
    assert resp.status_code == 200
    video_id = resp.json()["video_id"]
    listed = client.get("/videos").json()["videos"]
    assert [v["video_id"] for v in listed] == [video_id]
    bad = client.post("/videos", content=b"not hsaf")
    assert bad.status_code == 422


def test_http_job_flow_and_timeline(client):
    data = hsaf_bytes(60, seed=9)
    video_id = client.post("/videos", content=data).json()["video_id"]
    resp = client.post("/jobs", json={"video_id": video_id, "task_id": 3})
    assert resp.status_code == 200
    job = resp.json()
    assert job["status"] in ("queued", "running")

    deadline = time.time() + 120
    while time.time() < deadline:
        job = client.get(f"/jobs/{job['job_id']}").json()
        if job["status"] in ("done", "failed"):
            break
        time.sleep(0.05)
    assert job["status"] == "done"

    timeline_resp = client.get(f"/videos/{video_id}/timeline?task=3")
    assert timeline_resp.status_code == 200
    timeline = timeline_resp.json()
    assert validate_timeline(timeline) == []
    # pass-through: HTTP body equals persisted bytes exactly
    with open(job["result_path"], "rb") as fh:
        assert timeline_resp.content == fh.read()

    summary = client.get("/summary").json()
    assert summary["videos"] == 1


def test_http_errors(client):
    assert client.get("/jobs/unknown").status_code == 404
    assert client.get("/videos/unknown/timeline?task=3").status_code == 404
    assert client.post("/jobs", json={"video_id": "unknown", "task_id": 3}
                       ).status_code == 404
    assert client.post("/jobs", json={"task_id": 3}).status_code == 422
