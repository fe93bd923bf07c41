import { ApiClient } from "./api.js";
import { pollJob } from "./poll.js";
import {
  ViewState,
  idempotencyKeyFor,
  initialState,
  jobKey,
  selectPreset,
  selectVideo,
  setCursor,
  withBanner,
  withJob,
  withVideos,
} from "./state.js";
import {
  renderBanner,
  renderJobState,
  renderLibrary,
  renderSummaryCards,
  renderTaskSelector,
  renderTimeline,
  renderTimelineMissing,
} from "./render.js";
import { MAPPING_PRESETS } from "./types.js";
import type { Timeline } from "./types.js";

/** Browser shell: owns the state, re-renders on every transition, and talks
 * to the service exclusively through the API client. */
export class DashboardApp {
  state: ViewState = initialState();
  private timelines: Record<string, Timeline> = {};

  constructor(
    private root: HTMLElement,
    private api: ApiClient,
    private pollIntervalMs = 1000,
  ) {}

  async start(): Promise<void> {
    await this.refreshLibrary();
    this.render();
  }

  private set(state: ViewState): void {
    this.state = state;
    this.render();
  }

  async refreshLibrary(): Promise<void> {
    try {
      const videos = await this.api.listVideos();
      this.set(withVideos(this.state, videos));
    } catch (error) {
      this.set(withBanner(this.state, `service unreachable: ${error}`));
    }
  }

  async requestMapping(): Promise<void> {
    const videoId = this.state.selectedVideoId;
    if (!videoId) return;
    const preset = MAPPING_PRESETS[this.state.selectedPreset];
    try {
      const job = await this.api.createJob({
        video_id: videoId,
        task_id: preset.taskId,
        step_filter: preset.stepFilter,
        idempotency_key: idempotencyKeyFor(videoId, this.state.selectedPreset),
      });
      this.set(withJob(this.state, job));
      const finished = await pollJob(this.api, job.job_id, {
        intervalMs: this.pollIntervalMs,
        onUpdate: (update) => this.set(withJob(this.state, update)),
      });
      if (finished.status === "done") {
        this.timelines[jobKey(videoId, preset.taskId)] =
          await this.api.getTimeline(videoId, preset.taskId);
        this.render();
      }
    } catch (error) {
      this.set(withBanner(this.state, `mapping request failed: ${error}`));
    }
  }

  private render(): void {
    const { state } = this;
    const video = state.videos.find(
      (v) => v.video_id === state.selectedVideoId,
    );
    const preset = MAPPING_PRESETS[state.selectedPreset];
    const key = video ? jobKey(video.video_id, preset.taskId) : "";
    const timeline = this.timelines[key];
    const parts = [
      state.banner ? renderBanner(state.banner) : "",
      renderLibrary(state.videos, state.jobs),
      renderTaskSelector(state.selectedPreset),
      renderJobState(key ? (state.jobs[key] ?? null) : null),
      timeline
        ? renderTimeline(timeline, video ? video.duration_s : 0, state.cursorS)
        : renderTimelineMissing(),
    ];
    this.root.innerHTML = parts.join("\n");
    this.bind();
    void this.renderSummary();
  }

  private async renderSummary(): Promise<void> {
    try {
      const summary = await this.api.getSummary();
      const container = document.createElement("div");
      container.innerHTML = renderSummaryCards(summary);
      const previous = this.root.querySelector(".summary");
      if (previous) previous.replaceWith(container.firstElementChild!);
      else this.root.prepend(container.firstElementChild!);
    } catch {
      // summary is non-critical; the banner already reports connectivity
    }
  }

  private bind(): void {
    this.root.querySelectorAll<HTMLElement>(".video-card").forEach((card) => {
      card.addEventListener("click", () =>
        this.set(selectVideo(this.state, card.dataset.videoId!)),
      );
    });
    const selector = this.root.querySelector<HTMLSelectElement>(
      "[data-role=task-selector]",
    );
    selector?.addEventListener("change", () =>
      this.set(selectPreset(this.state, Number(selector.value))),
    );
    this.root
      .querySelector("[data-action=request-mapping]")
      ?.addEventListener("click", () => void this.requestMapping());
    this.root
      .querySelector("[data-action=retry]")
      ?.addEventListener("click", () => void this.refreshLibrary());
    this.root.querySelectorAll<HTMLElement>(".marker").forEach((marker) => {
      marker.addEventListener("click", () =>
        this.set(setCursor(this.state, Number(marker.dataset.startS))),
      );
    });
  }
}

export function mount(rootId = "app", baseUrl = ""): DashboardApp {
  const root = document.getElementById(rootId);
  if (!root) throw new Error(`no element #${rootId}`);
  const app = new DashboardApp(root, new ApiClient(baseUrl));
  void app.start();
  return app;
}
