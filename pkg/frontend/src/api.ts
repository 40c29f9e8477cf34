import {
  ApiError,
  FrameInfoPayload,
  NextReply,
  ProgressPayload,
  SubmitAck,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the annotation service endpoints. */
export class ApiClient {
  private readonly base: string;
  private readonly fetchFn: FetchLike;

  constructor(base: string, fetchFn: FetchLike) {
    this.base = base.replace(/\/+$/, "");
    this.fetchFn = fetchFn;
  }

  async nextPacket(leaseSeconds: number): Promise<NextReply> {
    return this.request<NextReply>("GET", `/api/queue/next?lease=${leaseSeconds}`);
  }

  async submitLabels(entryId: number, labels: Record<string, string>): Promise<SubmitAck> {
    return this.request<SubmitAck>("POST", `/api/queue/${entryId}/labels`, { labels });
  }

  async progress(): Promise<ProgressPayload> {
    return this.request<ProgressPayload>("GET", "/api/progress");
  }

  async params(): Promise<Record<string, number>> {
    return this.request<Record<string, number>>("GET", "/api/params");
  }

  async frameInfo(frameIndex: number): Promise<FrameInfoPayload> {
    return this.request<FrameInfoPayload>("GET", `/api/frames/${frameIndex}`);
  }

  frameImageUrl(frameIndex: number): string {
    return `${this.base}/api/frames/${frameIndex}/image`;
  }

  imageUrl(link: string): string {
    return `${this.base}${link}`;
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
      init.headers = { "Content-Type": "application/json" };
    }
    const response = await this.fetchFn(`${this.base}${path}`, init);
    const payload = await response.json();
    if (!response.ok) {
      throw new ApiError(response.status, payload);
    }
    return payload as T;
  }
}
