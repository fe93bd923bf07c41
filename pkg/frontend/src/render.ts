import { MAPPING_PRESETS } from "./types.js";
import type { Job, Summary, Timeline, Video } from "./types.js";

/** Pure HTML renderers: every value shown is derived from API payloads. */

function esc(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function fmtDuration(seconds: number): string {
  const m = Math.floor(seconds / 60);
  const s = Math.round(seconds % 60);
  return `${m}m${String(s).padStart(2, "0")}s`;
}

export function renderBanner(message: string): string {
  return (
    `<div class="banner error" role="alert">${esc(message)}` +
    `<button data-action="retry">retry</button></div>`
  );
}

export function renderLibrary(videos: Video[], jobs: Record<string, Job>): string {
  if (videos.length === 0) {
    return `<div class="library empty">No uploads yet. Upload an HSAF feature file to begin.</div>`;
  }
  const cards = videos.map((video) => {
    const related = Object.values(jobs).filter(
      (job) => job.video_id === video.video_id,
    );
    const status = related.length
      ? related[related.length - 1].status
      : "unmapped";
    return (
      `<div class="video-card" data-video-id="${esc(video.video_id)}">` +
      `<span class="title">${esc(video.title || video.video_id)}</span>` +
      `<span class="duration">${fmtDuration(video.duration_s)}</span>` +
      `<span class="badge ${status}">${status}</span>` +
      `</div>`
    );
  });
  return `<div class="library">${cards.join("")}</div>`;
}

export function renderTaskSelector(selected: number): string {
  const options = MAPPING_PRESETS.map(
    (preset, i) =>
      `<option value="${i}"${i === selected ? " selected" : ""}>` +
      `${esc(preset.label)}</option>`,
  );
  return `<select data-role="task-selector">${options.join("")}</select>`;
}

export function renderSummaryCards(summary: Summary): string {
  const cards: string[] = [];
  if (typeof summary.videos === "number") {
    cards.push(
      `<div class="card" data-metric="videos">` +
        `<span class="value">${summary.videos}</span>` +
        `<span class="label">videos mapped</span></div>`,
    );
  }
  if (
    summary.high_proficiency_fraction !== null &&
    summary.high_proficiency_fraction !== undefined
  ) {
    cards.push(
      `<div class="card" data-metric="high-proficiency">` +
        `<span class="value">${summary.high_proficiency_fraction}</span>` +
        `<span class="label">high-proficiency fraction</span></div>`,
    );
  }
  for (const [taskId, task] of Object.entries(summary.tasks)) {
    cards.push(
      `<div class="card" data-metric="task-${esc(taskId)}-segments">` +
        `<span class="value">${task.segment_count}</span>` +
        `<span class="label">task ${esc(taskId)} segments</span></div>`,
    );
  }
  return `<div class="summary">${cards.join("")}</div>`;
}

/** Time axis with one marker per segment; clicking a marker moves the
 * cursor to the segment start (wired in the app shell). */
export function renderTimeline(
  timeline: Timeline,
  durationS: number,
  cursorS: number,
): string {
  const pct = (t: number) =>
    durationS > 0 ? ((100 * t) / durationS).toFixed(2) : "0";
  const markers = timeline.segments.map((segment) => {
    const tags = Object.entries(segment.tags)
      .map(([tag, category]) => `${esc(tag)}=${esc(category)}`)
      .join(" ");
    const confidence = Object.entries(segment.confidence)
      .map(([tag, p]) => `${esc(tag)}:${p.toFixed(3)}`)
      .join(" ");
    return (
      `<div class="marker ${segment.stage}" data-start-s="${segment.start_s}"` +
      ` style="left:${pct(segment.start_s)}%;width:${pct(
        segment.end_s - segment.start_s,
      )}%"` +
      ` title="${tags}${confidence ? " | " + confidence : ""}"></div>`
    );
  });
  const cursor = `<div class="cursor" style="left:${pct(cursorS)}%"></div>`;
  return (
    `<div class="timeline" data-video-id="${esc(timeline.video_id)}"` +
    ` data-task-id="${timeline.task_id}">${markers.join("")}${cursor}</div>`
  );
}

export function renderTimelineMissing(): string {
  return (
    `<div class="timeline empty">No mapping yet for this selection. ` +
    `<button data-action="request-mapping">Run mapping</button></div>`
  );
}

export function renderJobState(job: Job | null): string {
  if (!job) return `<div class="job-state idle"></div>`;
  if (job.status === "failed") {
    return (
      `<div class="job-state failed">mapping failed: ` +
      `${esc(job.failure_reason ?? "unknown reason")}</div>`
    );
  }
  return `<div class="job-state ${job.status}">${job.status}</div>`;
}
