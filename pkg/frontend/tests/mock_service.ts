import type { FetchLike } from "../src/api.js";
import type { Job, Summary, Timeline, Video } from "../src/types.js";

/** In-memory stand-in for the mapping service, driving the HTTP contract
 * without a network. Jobs advance queued -> running -> done across polls. */
export class MockService {
  videos: Video[] = [];
  jobs = new Map<string, Job>();
  timelines = new Map<string, Timeline>();
  summary: Summary = { tasks: {}, high_proficiency_fraction: null, videos: 0 };
  pollsUntilDone = 2;
  getJobCalls = 0;
  failNextJob = false;

  addVideo(id: string, durationS: number, title = ""): Video {
    const video: Video = {
      video_id: id,
      title,
      duration_s: durationS,
      dim: 32,
      created_at: 0,
    };
    this.videos.push(video);
    return video;
  }

  addTimeline(timeline: Timeline): void {
    this.timelines.set(`${timeline.video_id}:${timeline.task_id}`, timeline);
  }

  fetch: FetchLike = async (url, init) => {
    const method = init?.method ?? "GET";
    const { pathname, searchParams } = new URL(url, "http://mock");

    if (pathname === "/videos" && method === "GET") {
      return json({ videos: this.videos });
    }
    if (pathname === "/jobs" && method === "POST") {
      const body = JSON.parse(String(init?.body));
      if (!this.videos.some((v) => v.video_id === body.video_id)) {
        return json({ detail: `unknown video ${body.video_id}` }, 404);
      }
      if (body.idempotency_key) {
        for (const job of this.jobs.values()) {
          if (job.idempotency_key === body.idempotency_key) return json(job);
        }
      }
      const job: Job = {
        job_id: `job-${this.jobs.size}`,
        video_id: body.video_id,
        request: {
          task_id: body.task_id,
          step_filter: body.step_filter ?? null,
          fine_window_s: body.fine_window_s ?? 4,
        },
        status: "queued",
        created_at: 0,
        updated_at: 0,
        result_path: null,
        failure_reason: this.failNextJob ? "synthetic failure" : null,
        idempotency_key: body.idempotency_key ?? null,
      };
      this.jobs.set(job.job_id, job);
      return json(job);
    }
    const jobMatch = pathname.match(/^\/jobs\/(.+)$/);
    if (jobMatch && method === "GET") {
      const job = this.jobs.get(jobMatch[1]);
      if (!job) return json({ detail: "unknown job" }, 404);
      this.getJobCalls += 1;
      if (job.status !== "done" && job.status !== "failed") {
        if (this.getJobCalls >= this.pollsUntilDone) {
          job.status = job.failure_reason ? "failed" : "done";
          if (job.status === "done") job.result_path = "/store/timeline.json";
        } else {
          job.status = "running";
        }
      }
      return json(job);
    }
    const timelineMatch = pathname.match(/^\/videos\/(.+)\/timeline$/);
    if (timelineMatch && method === "GET") {
      const key = `${timelineMatch[1]}:${searchParams.get("task")}`;
      const timeline = this.timelines.get(key);
      if (!timeline) return json({ detail: "no completed mapping" }, 404);
      return json(timeline);
    }
    if (pathname === "/summary" && method === "GET") {
      return json(this.summary);
    }
    return json({ detail: `unhandled ${method} ${pathname}` }, 500);
  };
}

function json(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}
