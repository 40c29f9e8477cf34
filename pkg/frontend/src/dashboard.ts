import { ApiClient } from "./api.js";
import { ProgressPayload } from "./types.js";

/**
 * Fixed-interval mirror of GET /api/progress. The latest payload is kept
 * verbatim; a failed poll keeps the previous payload and tries again on
 * the next beat.
 */
export class DashboardPoller {
  private readonly api: ApiClient;
  private readonly intervalMs: number;
  private readonly listeners: Array<(p: ProgressPayload) => void> = [];
  private timer: ReturnType<typeof setInterval> | null = null;

  latest: ProgressPayload | null = null;

  constructor(api: ApiClient, intervalMs = 1000) {
    this.api = api;
    this.intervalMs = intervalMs;
  }

  onChange(listener: (p: ProgressPayload) => void): void {
    this.listeners.push(listener);
  }

  async pollOnce(): Promise<ProgressPayload | null> {
    try {
      const payload = await this.api.progress();
      this.latest = payload;
      for (const listener of this.listeners) listener(payload);
      return payload;
    } catch {
      return null;
    }
  }

  start(): void {
    if (this.timer !== null) return;
    void this.pollOnce();
    this.timer = setInterval(() => void this.pollOnce(), this.intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }
}
