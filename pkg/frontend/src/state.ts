import { MAPPING_PRESETS } from "./types.js";
import type { Job, Video } from "./types.js";

/** Client view state; every transition returns a new state object. */
export interface ViewState {
  videos: Video[];
  selectedVideoId: string | null;
  selectedPreset: number;
  cursorS: number;
  jobs: Record<string, Job>;
  banner: string | null;
}

export function initialState(): ViewState {
  return {
    videos: [],
    selectedVideoId: null,
    selectedPreset: 0,
    cursorS: 0,
    jobs: {},
    banner: null,
  };
}

export function withVideos(state: ViewState, videos: Video[]): ViewState {
  const stillThere = videos.some((v) => v.video_id === state.selectedVideoId);
  return {
    ...state,
    videos,
    selectedVideoId: stillThere ? state.selectedVideoId : null,
    banner: null,
  };
}

export function selectVideo(state: ViewState, videoId: string): ViewState {
  if (!state.videos.some((v) => v.video_id === videoId)) {
    return { ...state, banner: `unknown video ${videoId}` };
  }
  return { ...state, selectedVideoId: videoId, cursorS: 0 };
}

export function selectPreset(state: ViewState, index: number): ViewState {
  if (index < 0 || index >= MAPPING_PRESETS.length) {
    return { ...state, banner: `unknown mapping preset ${index}` };
  }
  return { ...state, selectedPreset: index };
}

/** The timeline cursor stays within the selected video's duration. */
export function setCursor(state: ViewState, seconds: number): ViewState {
  const video = state.videos.find((v) => v.video_id === state.selectedVideoId);
  const limit = video ? video.duration_s : 0;
  const cursorS = Math.min(Math.max(seconds, 0), limit);
  return { ...state, cursorS };
}

export function jobKey(videoId: string, taskId: number): string {
  return `${videoId}:${taskId}`;
}

export function withJob(state: ViewState, job: Job): ViewState {
  return {
    ...state,
    jobs: { ...state.jobs, [jobKey(job.video_id, job.request.task_id)]: job },
  };
}

export function withBanner(state: ViewState, banner: string | null): ViewState {
  return { ...state, banner };
}

/** Idempotency key for duplicate-click protection on job creation. */
export function idempotencyKeyFor(videoId: string, presetIndex: number): string {
  const preset = MAPPING_PRESETS[presetIndex];
  return `${videoId}:${preset.taskId}:${preset.stepFilter ?? "all"}`;
}
