/** Payload shapes of the mapping service HTTP/JSON API. */

export interface Video {
  video_id: string;
  title: string;
  duration_s: number;
  dim: number;
  created_at: number;
}

export type JobStatus = "queued" | "running" | "done" | "failed";

export interface MappingRequestBody {
  video_id: string;
  task_id: number;
  step_filter?: string | null;
  fine_window_s?: number;
  idempotency_key?: string;
}

export interface Job {
  job_id: string;
  video_id: string;
  request: {
    task_id: number;
    step_filter: string | null;
    fine_window_s: number;
  };
  status: JobStatus;
  created_at: number;
  updated_at: number;
  result_path: string | null;
  failure_reason: string | null;
  idempotency_key: string | null;
}

export interface TimelineSegment {
  start_s: number;
  end_s: number;
  stage: "coarse" | "fine";
  task_id: number;
  tags: Record<string, string>;
  confidence: Record<string, number>;
  selected?: boolean;
}

export interface CategoryStats {
  count: number;
  duration_s: number;
}

export interface TaskSummary {
  segment_count: number;
  tags: Record<string, Record<string, CategoryStats>>;
}

export interface Summary {
  tasks: Record<string, TaskSummary>;
  high_proficiency_fraction?: number | null;
  proficiency_segments?: number;
  videos?: number;
}

export interface Timeline {
  video_id: string;
  task_id: number;
  step_filter: string | null;
  segments: TimelineSegment[];
  summary: Summary;
}

/** Mapping presets offered in the task selector; proficiency and context
 * mappings focus on suturing segments. */
export interface MappingPreset {
  label: string;
  taskId: number;
  stepFilter: string | null;
}

export const MAPPING_PRESETS: MappingPreset[] = [
  { label: "macro activity", taskId: 1, stepFilter: null },
  { label: "micro activity", taskId: 2, stepFilter: null },
  { label: "suturing proficiency", taskId: 3, stepFilter: "suturing" },
  { label: "suturing context", taskId: 4, stepFilter: "suturing" },
];
