"""Mapping service: video/feature registration, asynchronous mapping jobs,
persistent results.

Persistence is a plain directory tree; every mutation is an atomic
write-then-rename so a killed process never leaves corrupt state.  On
startup, jobs found in ``running`` are re-queued (crash recovery), so a job
is never stuck.  Completion is idempotent: the timeline commit is
deterministic and atomic, and the job flips to ``done`` only after the
result is on disk.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import threading
import time
import uuid
from dataclasses import dataclass

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.responses import JSONResponse

from .corpus import CorpusError, read_hsaf
from .model import load_checkpoint
from .taxonomy import TaxonomyRegistry, default_registry
from .tokenizer import load_vocab
from .workflow import MappingRequest, WorkflowError, run_mapping, timeline_to_json

__all__ = ["ServiceConfig", "MappingService", "ServiceError", "create_app"]

logger = logging.getLogger(__name__)

JOB_STATUSES = ("queued", "running", "done", "failed")


class ServiceError(Exception):
    pass


@dataclass
class ServiceConfig:
    store_dir: str
    checkpoint_path: str
    vocab_path: str
    workers: int = 2
    port: int = 8077


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + f".tmp-{os.getpid()}-{threading.get_ident()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _write_json(path: str, obj: dict) -> None:
    _atomic_write(path, (json.dumps(obj, sort_keys=True) + "\n").encode())


class MappingService:
    """Store + worker pool; the HTTP layer is a thin veneer over this."""

    def __init__(self, config: ServiceConfig,
                 registry: TaxonomyRegistry | None = None):
        self.config = config
        self.registry = registry or default_registry
        self.state = load_checkpoint(config.checkpoint_path)
        self.vocab = load_vocab(config.vocab_path)
        self._lock = threading.Lock()
        self._queue: queue.Queue[str] = queue.Queue()
        self._workers: list[threading.Thread] = []
        self._stop = threading.Event()
        for sub in ("videos", "jobs", "timelines"):
            os.makedirs(os.path.join(config.store_dir, sub), exist_ok=True)
        self._recover()

    # ------------------------------------------------------------- paths

    def _video_dir(self, video_id: str) -> str:
        return os.path.join(self.config.store_dir, "videos", video_id)

    def _job_path(self, job_id: str) -> str:
        return os.path.join(self.config.store_dir, "jobs", job_id + ".json")

    def _timeline_path(self, video_id: str, task_id: int) -> str:
        d = os.path.join(self.config.store_dir, "timelines", video_id)
        os.makedirs(d, exist_ok=True)
        return os.path.join(d, f"{task_id}.json")

    # ------------------------------------------------------------ videos

    def register_video(self, hsaf_bytes: bytes, title: str = "") -> dict:
        """Store an uploaded HSAF feature file, content-addressed.

        Re-uploading identical content returns the existing video id.
        """
        digest = hashlib.sha256(hsaf_bytes).hexdigest()[:16]
        video_id = f"vid-{digest}"
        vdir = self._video_dir(video_id)
        meta_path = os.path.join(vdir, "meta.json")
        with self._lock:
            if os.path.exists(meta_path):
                with open(meta_path, encoding="utf-8") as fh:
                    return json.load(fh)
            os.makedirs(vdir, exist_ok=True)
            feat_path = os.path.join(vdir, "features.hsaf")
            _atomic_write(feat_path, hsaf_bytes)
            try:
                rows = read_hsaf(feat_path)
            except CorpusError as exc:
                os.remove(feat_path)
                os.rmdir(vdir)
                raise ServiceError(f"invalid HSAF upload: {exc}") from exc
            if rows.shape[0] < 1:
                os.remove(feat_path)
                os.rmdir(vdir)
                raise ServiceError("invalid HSAF upload: zero rows")
            meta = {
                "video_id": video_id,
                "title": title,
                "duration_s": int(rows.shape[0]),
                "dim": int(rows.shape[1]),
                "created_at": time.time(),
            }
            _write_json(meta_path, meta)
        return meta

    def list_videos(self) -> list[dict]:
        base = os.path.join(self.config.store_dir, "videos")
        out = []
        for name in sorted(os.listdir(base)):
            meta_path = os.path.join(base, name, "meta.json")
            if os.path.exists(meta_path):
                with open(meta_path, encoding="utf-8") as fh:
                    out.append(json.load(fh))
        return out

    def get_video(self, video_id: str) -> dict | None:
        meta_path = os.path.join(self._video_dir(video_id), "meta.json")
        if not os.path.exists(meta_path):
            return None
        with open(meta_path, encoding="utf-8") as fh:
            return json.load(fh)

    # -------------------------------------------------------------- jobs

    def create_job(self, video_id: str, task_id: int,
                   step_filter: str | None = None,
                   fine_window_s: float = 4.0,
                   idempotency_key: str | None = None) -> dict:
        if self.get_video(video_id) is None:
            raise KeyError(f"unknown video {video_id}")
        try:
            self.registry.schema_for_task(task_id)
            MappingRequest(video_id=video_id, task_id=task_id,
                           step_filter=step_filter, fine_window_s=fine_window_s)
        except (KeyError, WorkflowError) as exc:
            raise ServiceError(f"invalid mapping request: {exc}") from exc

        with self._lock:
            if idempotency_key:
                for job in self._all_jobs():
                    if job.get("idempotency_key") == idempotency_key:
                        return job
            job = {
                "job_id": str(uuid.uuid4()),
                "video_id": video_id,
                "request": {
                    "task_id": task_id,
                    "step_filter": step_filter,
                    "fine_window_s": fine_window_s,
                },
                "status": "queued",
                "created_at": time.time(),
                "updated_at": time.time(),
                "result_path": None,
                "failure_reason": None,
                "idempotency_key": idempotency_key,
            }
            _write_json(self._job_path(job["job_id"]), job)
        self._queue.put(job["job_id"])
        return job

    def _all_jobs(self) -> list[dict]:
        base = os.path.join(self.config.store_dir, "jobs")
        jobs = []
        for name in sorted(os.listdir(base)):
            if name.endswith(".json"):
                with open(os.path.join(base, name), encoding="utf-8") as fh:
                    jobs.append(json.load(fh))
        return jobs

    def job_status(self, job_id: str) -> dict | None:
        path = self._job_path(job_id)
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def _update_job(self, job: dict, **changes) -> dict:
        job = dict(job, **changes, updated_at=time.time())
        _write_json(self._job_path(job["job_id"]), job)
        return job

    def _recover(self) -> None:
        """Re-queue jobs interrupted by a crash; enqueue pending ones."""
        for job in self._all_jobs():
            if job["status"] == "running":
                logger.warning("re-queueing interrupted job %s", job["job_id"])
                job = self._update_job(job, status="queued")
            if job["status"] == "queued":
                self._queue.put(job["job_id"])

    # ----------------------------------------------------------- workers

    def start_workers(self) -> None:
        for i in range(self.config.workers):
            t = threading.Thread(target=self._worker_loop, daemon=True,
                                 name=f"mapping-worker-{i}")
            t.start()
            self._workers.append(t)

    def stop_workers(self) -> None:
        self._stop.set()
        for t in self._workers:
            t.join(timeout=5)
        self._workers.clear()

    def _worker_loop(self) -> None:
        while not self._stop.is_set():
            try:
                job_id = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            try:
                self._execute(job_id)
            except Exception:
                logger.exception("worker crashed on job %s", job_id)

    def _execute(self, job_id: str) -> None:
        job = self.job_status(job_id)
        if job is None or job["status"] not in ("queued",):
            return
        job = self._update_job(job, status="running")
        try:
            request = MappingRequest(video_id=job["video_id"], **job["request"])
            rows = read_hsaf(os.path.join(self._video_dir(job["video_id"]),
                                          "features.hsaf"))
            timeline = run_mapping(rows, request, self.state, self.vocab,
                                   self.registry)
            result_path = self._timeline_path(job["video_id"],
                                              request.task_id)
            _atomic_write(result_path, timeline_to_json(timeline))
            self._update_job(job, status="done", result_path=result_path)
        except Exception as exc:
            logger.exception("job %s failed", job_id)
            self._update_job(job, status="failed", failure_reason=str(exc))

    # ------------------------------------------------------------ output

    def get_timeline_bytes(self, video_id: str, task_id: int) -> bytes | None:
        path = self._timeline_path(video_id, task_id)
        if not os.path.exists(path):
            return None
        with open(path, "rb") as fh:
            return fh.read()

    def get_summary(self) -> dict:
        """Aggregate across all videos with completed mappings."""
        base = os.path.join(self.config.store_dir, "timelines")
        total: dict = {"videos": 0, "tasks": {}}
        prof_high = prof_total = 0
        if not os.path.isdir(base):
            return dict(total, high_proficiency_fraction=None)
        for video in sorted(os.listdir(base)):
            vdir = os.path.join(base, video)
            counted = False
            for name in sorted(os.listdir(vdir)):
                with open(os.path.join(vdir, name), encoding="utf-8") as fh:
                    timeline = json.load(fh)
                counted = True
                summary = timeline.get("summary", {})
                for task, tdata in summary.get("tasks", {}).items():
                    agg = total["tasks"].setdefault(task, {
                        "segment_count": 0, "tags": {},
                    })
                    agg["segment_count"] += tdata["segment_count"]
                    for tag, cats in tdata["tags"].items():
                        tagg = agg["tags"].setdefault(tag, {})
                        for cat, stats in cats.items():
                            c = tagg.setdefault(cat, {"count": 0, "duration_s": 0.0})
                            c["count"] += stats["count"]
                            c["duration_s"] = round(
                                c["duration_s"] + stats["duration_s"], 6)
                if "proficiency_segments" in summary:
                    n = summary["proficiency_segments"]
                    prof_total += n
                    prof_high += round(summary["high_proficiency_fraction"] * n)
            if counted:
                total["videos"] += 1
        total["high_proficiency_fraction"] = (
            prof_high / prof_total if prof_total else None
        )
        total["proficiency_segments"] = prof_total
        return total


def create_app(service: MappingService):
    """FastAPI app exposing the service over HTTP/JSON."""
    app = FastAPI(title="surgimap mapping service")

    @app.post("/videos")
    async def post_video(request: Request, title: str = ""):
        body = await request.body()
        try:
            meta = service.register_video(body, title=title)
        except ServiceError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return meta

    @app.get("/videos")
    def get_videos():
        return {"videos": service.list_videos()}

    @app.post("/jobs")
    def post_job(payload: dict):
        for key in ("video_id", "task_id"):
            if key not in payload:
                raise HTTPException(status_code=422, detail=f"missing field {key}")
        try:
            job = service.create_job(
                video_id=payload["video_id"],
                task_id=int(payload["task_id"]),
                step_filter=payload.get("step_filter"),
                fine_window_s=float(payload.get("fine_window_s", 4.0)),
                idempotency_key=payload.get("idempotency_key"),
            )
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except (ServiceError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return job

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = service.job_status(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown job {job_id}")
        return job

    @app.get("/videos/{video_id}/timeline")
    def get_timeline(video_id: str, task: int):
        data = service.get_timeline_bytes(video_id, task)
        if data is None:
            raise HTTPException(
                status_code=404,
                detail=f"no completed mapping for video {video_id} task {task}; "
                       "create a job first",
            )
        return Response(content=data, media_type="application/json")

    @app.get("/summary")
    def get_summary():
        return JSONResponse(service.get_summary())

    return app


def serve(config: ServiceConfig, registry: TaxonomyRegistry | None = None) -> None:
    """Run the HTTP service until interrupted (used by the CLI)."""
    import uvicorn

    service = MappingService(config, registry=registry)
    service.start_workers()
    app = create_app(service)
    uvicorn.run(app, host="127.0.0.1", port=config.port, log_level="warning")
