import type { ApiClient } from "./api.js";
import type { Job } from "./types.js";

export interface PollOptions {
  intervalMs?: number;
  maxAttempts?: number;
  onUpdate?: (job: Job) => void;
}

/**
 * Poll a job until it reaches a terminal state.
 *
 * Resolves with the job on both done and failed (the caller surfaces the
 * failure reason); polling stops within one interval of the terminal
 * status appearing. Rejects only on transport errors or on exceeding
 * maxAttempts.
 */
export async function pollJob(
  api: ApiClient,
  jobId: string,
  options: PollOptions = {},
): Promise<Job> {
  const intervalMs = options.intervalMs ?? 1000;
  const maxAttempts = options.maxAttempts ?? 600;
  for (let attempt = 0; attempt < maxAttempts; attempt++) {
    const job = await api.getJob(jobId);
    options.onUpdate?.(job);
    if (job.status === "done" || job.status === "failed") {
      return job;
    }
    await new Promise((resolve) => setTimeout(resolve, intervalMs));
  }
  throw new Error(`job ${jobId} still pending after ${maxAttempts} polls`);
}
