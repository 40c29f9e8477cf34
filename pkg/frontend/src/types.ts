// Wire shapes of the annotation service HTTP/JSON API. The UI never
// fabricates state: everything rendered traces back to one of these.

export interface QueueEntryPayload {
  entry_id: number;
  packet_id: number;
  segment_id: number;
  reason: string;
  frames: number[];
  status: string;
  lease_seconds_remaining: number | null;
}

export interface NextReply {
  entry: QueueEntryPayload | null;
  drained: boolean;
}

export interface SubmitAck {
  entry: QueueEntryPayload;
  duplicate: boolean;
}

export interface ProgressPayload {
  state: string;
  drained: boolean;
  states: string[];
  pending_packets: number;
  model_version: number;
  error: string | null;
  total_frames: number;
  manual_frames: number;
  auto_frames: number | null;
  reduction_factor: number | null;
  accuracy: number | null;
  no_manual: boolean | null;
}

export interface FrameInfoPayload {
  frame_index: number;
  object_present: boolean;
  class_probs: number[] | null;
  change_score: number | null;
  ground_truth: string | null;
  image: string | null;
}

export interface RejectionPayload {
  error: string;
  missing?: number[];
  extra?: number[];
}

export class ApiError extends Error {
  readonly status: number;
  readonly body: RejectionPayload;

  constructor(status: number, body: RejectionPayload) {
    super(body.error);
    this.status = status;
    this.body = body;
  }
}
