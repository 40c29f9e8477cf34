import { ApiClient } from "./api.js";
import { ApiError, FrameInfoPayload, QueueEntryPayload } from "./types.js";

export type SessionPhase =
  | "idle"
  | "connecting"
  | "waiting"
  | "labeling"
  | "submitting"
  | "stale"
  | "offline"
  | "drained";

export interface FrameCard {
  frameIndex: number;
  info: FrameInfoPayload | null;
  selected: string | null;
}

export interface Rejection {
  message: string;
  frames: number[];
}

export interface SessionSnapshot {
  phase: SessionPhase;
  entry: QueueEntryPayload | null;
  cards: FrameCard[];
  focus: number;
  states: string[];
  leaseRemaining: number | null;
  canSubmit: boolean;
  rejection: Rejection | null;
  attempt: number;
  statusNote: string;
}

export interface SessionOptions {
  leaseSeconds?: number;
  pollMs?: number;
  backoffBaseMs?: number;
  backoffCapMs?: number;
  clock?: () => number;
  delay?: (ms: number) => Promise<void>;
}

const defaultDelay = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

/**
 * Labeling state machine, deliberately DOM-free: the view subscribes and
 * renders snapshots, the host forwards keystrokes and a periodic tick.
 * At most one leased packet at a time.
 */
export class AnnotationSession {
  private readonly api: ApiClient;
  private readonly leaseSeconds: number;
  private readonly pollMs: number;
  private readonly backoffBaseMs: number;
  private readonly backoffCapMs: number;
  private readonly clock: () => number;
  private readonly delay: (ms: number) => Promise<void>;
  private readonly listeners: Array<(s: SessionSnapshot) => void> = [];

  private phase: SessionPhase = "idle";
  private entry: QueueEntryPayload | null = null;
  private cards: FrameCard[] = [];
  private focus = 0;
  private states: string[];
  private leaseDeadline: number | null = null;
  private shownLease: number | null = null;
  private rejection: Rejection | null = null;
  private attempt = 0;
  private statusNote = "";
  private busy = false;
  private stopped = false;

  constructor(api: ApiClient, states: string[], options: SessionOptions = {}) {
    this.api = api;
    this.states = states.slice();
    this.leaseSeconds = options.leaseSeconds ?? 120;
    this.pollMs = options.pollMs ?? 500;
    this.backoffBaseMs = options.backoffBaseMs ?? 500;
    this.backoffCapMs = options.backoffCapMs ?? 5000;
    this.clock = options.clock ?? (() => Date.now() / 1000);
    this.delay = options.delay ?? defaultDelay;
  }

  onChange(listener: (s: SessionSnapshot) => void): void {
    this.listeners.push(listener);
  }

  snapshot(): SessionSnapshot {
    return {
      phase: this.phase,
      entry: this.entry,
      cards: this.cards.map((c) => ({ ...c })),
      focus: this.focus,
      states: this.states.slice(),
      leaseRemaining: this.leaseRemaining(),
      canSubmit: this.canSubmit(),
      rejection: this.rejection,
      attempt: this.attempt,
      statusNote: this.statusNote,
    };
  }

  start(): void {
    if (this.phase !== "idle") return;
    void this.cycle();
  }

  stop(): void {
    this.stopped = true;
  }

  /** Returns true when the key was consumed (host should preventDefault). */
  handleKey(key: string): boolean {
    if (this.phase === "labeling") {
      if (key >= "1" && key <= "9") {
        const state = this.states[Number(key) - 1];
        if (state === undefined) return false;
        const card = this.cards[this.focus];
        if (card === undefined) return false;
        card.selected = state;
        this.focus = Math.min(this.focus + 1, this.cards.length - 1);
        this.emit();
        return true;
      }
      if (key === "ArrowLeft" || key === "ArrowRight") {
        const step = key === "ArrowLeft" ? -1 : 1;
        this.focus = Math.min(Math.max(this.focus + step, 0), this.cards.length - 1);
        this.emit();
        return true;
      }
      if (key === "Enter") {
        if (!this.canSubmit()) return false;
        void this.submit();
        return true;
      }
      return false;
    }
    if (this.phase === "stale" && key === "Enter") {
      void this.cycle();
      return true;
    }
    return false;
  }

  /** Drive the lease countdown; call on a short host interval. */
  tick(): void {
    if (this.phase !== "labeling") return;
    const remaining = this.leaseRemaining();
    if (remaining !== null && remaining <= 0) {
      this.toStale("lease expired before submit; press Enter to fetch again");
      return;
    }
    if (remaining !== this.shownLease) {
      this.shownLease = remaining;
      this.emit();
    }
  }

  private leaseRemaining(): number | null {
    if (this.leaseDeadline === null) return null;
    return Math.max(Math.ceil(this.leaseDeadline - this.clock()), 0);
  }

  private canSubmit(): boolean {
    return (
      this.phase === "labeling" &&
      this.cards.length > 0 &&
      this.cards.every((c) => c.selected !== null)
    );
  }

  private async cycle(): Promise<void> {
    if (this.busy) return;
    this.busy = true;
    this.entry = null;
    this.cards = [];
    this.leaseDeadline = null;
    this.rejection = null;
    this.setPhase("connecting", "fetching the next packet");
    try {
      while (!this.stopped) {
        try {
          const reply = await this.api.nextPacket(this.leaseSeconds);
          if (reply.entry === null) {
            if (reply.drained) {
              this.setPhase("drained", "queue drained; nothing left to label");
              return;
            }
            this.setPhase("waiting", "queue empty, pipeline still running");
            await this.delay(this.pollMs);
            continue;
          }
          const infos = await Promise.all(
            reply.entry.frames.map((f) => this.api.frameInfo(f)),
          );
          this.beginLabeling(reply.entry, infos);
          return;
        } catch (err) {
          this.attempt += 1;
          this.setPhase("offline", `request failed (${describe(err)}); retrying`);
          await this.delay(this.backoff());
        }
      }
    } finally {
      this.busy = false;
    }
  }

  private beginLabeling(entry: QueueEntryPayload, infos: FrameInfoPayload[]): void {
    this.entry = entry;
    this.cards = entry.frames.map((frameIndex, i) => ({
      frameIndex,
      info: infos[i] ?? null,
      selected: null,
    }));
    this.focus = 0;
    this.attempt = 0;
    this.rejection = null;
    this.leaseDeadline =
      entry.lease_seconds_remaining === null
        ? null
        : this.clock() + entry.lease_seconds_remaining;
    this.shownLease = this.leaseRemaining();
    this.setPhase("labeling", `packet #${entry.packet_id}: ${entry.reason}`);
  }

  private async submit(): Promise<void> {
    if (this.busy || this.entry === null) return;
    this.busy = true;
    const entryId = this.entry.entry_id;
    const labels: Record<string, string> = {};
    for (const card of this.cards) {
      if (card.selected !== null) labels[String(card.frameIndex)] = card.selected;
    }
    this.setPhase("submitting", "submitting labels");
    try {
      while (!this.stopped) {
        try {
          // a duplicate acknowledgment is success: the retry raced an
          // earlier attempt that actually landed
          await this.api.submitLabels(entryId, labels);
          this.attempt = 0;
          this.busy = false;
          await this.cycle();
          return;
        } catch (err) {
          if (err instanceof ApiError && err.status === 400) {
            const missing = err.body.missing ?? [];
            const extra = err.body.extra ?? [];
            this.rejection = { message: err.body.error, frames: [...missing, ...extra] };
            this.setPhase("labeling", "submission rejected");
            return;
          }
          if (err instanceof ApiError) {
            this.toStale(`lease lost (${err.body.error}); press Enter to fetch again`);
            return;
          }
          this.attempt += 1;
          this.setPhase("offline", `submit failed (${describe(err)}); retrying`);
          await this.delay(this.backoff());
          this.setPhase("submitting", "submitting labels");
        }
      }
    } finally {
      this.busy = false;
    }
  }

  private toStale(note: string): void {
    this.entry = null;
    this.cards = [];
    this.leaseDeadline = null;
    this.setPhase("stale", note);
  }

  private backoff(): number {
    const exp = this.backoffBaseMs * 2 ** Math.max(this.attempt - 1, 0);
    return Math.min(exp, this.backoffCapMs);
  }

  private setPhase(phase: SessionPhase, note: string): void {
    this.phase = phase;
    this.statusNote = note;
    this.emit();
  }

  private emit(): void {
    const snap = this.snapshot();
    for (const listener of this.listeners) listener(snap);
  }
}

function describe(err: unknown): string {
  return err instanceof Error ? err.message : String(err);
}
