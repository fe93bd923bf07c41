import type { Job, MappingRequestBody, Summary, Timeline, Video } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

/** Thin typed client over the service API; fetch is injectable for tests. */
export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (url, init) => fetch(url, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = await response.json();
        if (body && body.detail) detail = String(body.detail);
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  async listVideos(): Promise<Video[]> {
    const body = await this.request<{ videos: Video[] }>("/videos");
    return body.videos;
  }

  registerVideo(data: ArrayBuffer | Uint8Array, title: string): Promise<Video> {
    const query = title ? `?title=${encodeURIComponent(title)}` : "";
    return this.request<Video>(`/videos${query}`, {
      method: "POST",
      headers: { "content-type": "application/octet-stream" },
      body: data as BodyInit,
    });
  }

  createJob(request: MappingRequestBody): Promise<Job> {
    return this.request<Job>("/jobs", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
  }

  getJob(jobId: string): Promise<Job> {
    return this.request<Job>(`/jobs/${jobId}`);
  }

  getTimeline(videoId: string, taskId: number): Promise<Timeline> {
    return this.request<Timeline>(`/videos/${videoId}/timeline?task=${taskId}`);
  }

  getSummary(): Promise<Summary> {
    return this.request<Summary>("/summary");
  }
}
