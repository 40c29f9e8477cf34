"""Semi-automated annotation over segmented record streams.

Per segment: detected change points are confidence-gated on their context
frames, the spans between change points are verified by comparing testimony
labels at their closed ends, surviving spans are auto-labeled when one
unchanged state explains them nearly as well as the best state path, and
everything that fails a gate is queued for a human. Manual answers always
win; finished labels feed periodic prior/transition re-estimation.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .hmm import (
    HmmModel,
    StableScore,
    StateSpace,
    estimate_emission,
    estimate_model,
    stable_state_score,
)
from .providers import RecordStream

REASON_UNCONFIDENT = "unconfident_change"
REASON_UNVERIFIED = "unverified_interval"
REASON_UNSTABLE = "unstable_segment"
REASON_SEED = "seed"
REASONS = (REASON_UNCONFIDENT, REASON_UNVERIFIED, REASON_UNSTABLE, REASON_SEED)

SOURCE_MANUAL = "manual"
SOURCE_CONFIDENT = "auto_confident"
SOURCE_STABLE = "auto_stable"
SOURCES = (SOURCE_MANUAL, SOURCE_CONFIDENT, SOURCE_STABLE)

_NO_LABEL = -1
# Internal source codes, ordered so that a larger code always wins a merge.
CODE_NONE = 0
CODE_STABLE = 1
CODE_CONFIDENT = 2
CODE_MANUAL = 3
SOURCE_BY_CODE = {
    CODE_STABLE: SOURCE_STABLE,
    CODE_CONFIDENT: SOURCE_CONFIDENT,
    CODE_MANUAL: SOURCE_MANUAL,
}


class PipelineError(ValueError):
    """Raised when a stream or configuration cannot be processed."""


class AnnotatorContractError(RuntimeError):
    """Raised when an annotator's answer does not match its packet."""


class AnnotationAborted(RuntimeError):
    """The annotator failed; `partial` holds everything finished before."""

    def __init__(self, message: str, partial: "AnnotationRun"):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class PipelineParams:
    delta_min: float = 0.3
    c_min: float = 10.0
    v_u_min: float = 1.5
    context_radius: int = 2
    retrain_interval: int = 20000
    smoothing_alpha: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.delta_min < 1.0:
            raise ValueError("delta_min must lie in (0, 1)")
        if self.c_min < 1.0:
            raise ValueError("c_min must be >= 1")
        if self.v_u_min <= 0.0:
            raise ValueError("v_u_min must be positive")
        if self.context_radius < 1:
            raise ValueError("context_radius must be >= 1")
        if self.retrain_interval < 1:
            raise ValueError("retrain_interval must be >= 1")
        if self.smoothing_alpha < 0.0:
            raise ValueError("smoothing_alpha must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineParams":
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown pipeline parameter(s): {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Segment:
    """Maximal run of present frames with consecutive indices, inclusive."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if self.end < self.start:
            raise ValueError("segment end precedes its start")

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class ChangePoint:
    """Detected change at frame_index; labels are None unless the gate passed."""

    frame_index: int
    pre_label: int | None
    post_label: int | None


@dataclass(frozen=True)
class AnnotationPacket:
    packet_id: int
    reason: str
    frames: tuple[int, ...]
    segment_id: int

    def __post_init__(self) -> None:
        if self.reason not in REASONS:
            raise ValueError(f"unknown packet reason {self.reason!r}")
        if not self.frames:
            raise ValueError("a packet must carry at least one frame")
        if any(b <= a for a, b in zip(self.frames, self.frames[1:])):
            raise ValueError("packet frames must be strictly increasing")


@dataclass(frozen=True)
class LabelRecord:
    frame_index: int
    state: int
    source: str


def segment_frames(stream: RecordStream) -> tuple[Segment, ...]:
    """Maximal present runs; an absent frame or an index gap ends a run."""
    return tuple(
        Segment(int(stream.frame_index[a]), int(stream.frame_index[b]))
        for a, b in _present_runs(stream)
    )


def _present_runs(stream: RecordStream) -> list[tuple[int, int]]:
    pos = np.flatnonzero(stream.present)
    if pos.size == 0:
        return []
    idx = stream.frame_index[pos]
    brk = np.flatnonzero((np.diff(pos) != 1) | (np.diff(idx) != 1))
    starts = np.r_[0, brk + 1]
    ends = np.r_[brk, pos.size - 1]
    return [(int(pos[a]), int(pos[b])) for a, b in zip(starts, ends)]


def confident_class(probs: Sequence[float], c_min: float) -> int | None:
    """The argmax class iff its probability beats the runner-up c_min-fold.

    Ties give ratio 1, so they pass only at c_min == 1 and resolve to the
    lowest index; a zero runner-up makes the ratio infinite.
    """
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError("probs must be a 1-d vector over at least two classes")
    k = int(arr.argmax())
    p1 = float(arr[k])
    p2 = float(np.partition(arr, arr.size - 2)[-2])
    if p1 <= 0.0:
        return None
    if p2 <= 0.0:
        return k
    return k if p1 / p2 >= c_min else None


def binarize_changes(scores: Sequence[float], delta_min: float) -> tuple[int, ...]:
    """Positions t >= 1 whose score crosses delta_min.

    Position 0 never carries a score (no predecessor inside the segment);
    a missing score anywhere else is an error.
    """
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("scores must be a non-empty 1-d sequence")
    gaps = np.isnan(arr[1:])
    if gaps.any():
        raise ValueError(f"missing change score at position {int(np.flatnonzero(gaps)[0]) + 1}")
    return tuple(int(t) for t in np.flatnonzero(arr[1:] >= delta_min) + 1)


@dataclass(frozen=True)
class SegmentPlan:
    """Everything process_segment decided for one segment.

    states/sources are per-position arrays over the segment (frame ==
    segment.start + position); manual answers are merged in afterwards.
    """

    segment_id: int
    segment: Segment
    change_points: tuple[ChangePoint, ...]
    packets: tuple[AnnotationPacket, ...]
    states: np.ndarray
    sources: np.ndarray

    def auto_labels(self) -> dict[int, tuple[int, str]]:
        out: dict[int, tuple[int, str]] = {}
        for pos in np.flatnonzero(self.sources != CODE_NONE):
            code = int(self.sources[pos])
            out[self.segment.start + int(pos)] = (int(self.states[pos]), SOURCE_BY_CODE[code])
        return out


def process_segment(
    stream: RecordStream,
    segment: Segment,
    model: HmmModel,
    params: PipelineParams,
    segment_id: int = 0,
    first_packet_id: int = 0,
    cache: dict[bytes, StableScore] | None = None,
) -> SegmentPlan:
    """Plan one segment: change points, auto labels, and packet drafts.

    Packets are drafted in dispatch order (unconfident windows, then
    unverified spans, then unstable spans); a frame never appears in two of
    them, so manual effort counts stay honest.
    """
    if model.states != stream.states:
        raise PipelineError("model and stream disagree on the state space")
    pa = stream.position(segment.start)
    m = len(segment)
    if pa + m > len(stream) or int(stream.frame_index[pa + m - 1]) != segment.end:
        raise PipelineError("segment frames are not consecutive in the stream")
    sl = slice(pa, pa + m)
    if not stream.present[sl].all():
        raise PipelineError("segment covers an absent frame")
    probs = stream.probs[sl]
    scores = stream.score[sl]
    size = stream.states.size
    radius = params.context_radius
    if cache is None:
        cache = {}

    decisions = probs.argmax(axis=1)
    top_two = np.partition(probs, size - 2, axis=1)
    p1 = top_two[:, -1]
    p2 = top_two[:, -2]
    ratio = np.where(p2 > 0.0, p1 / np.where(p2 > 0.0, p2, 1.0), np.inf)
    confident = ratio >= params.c_min

    if m > 1:
        gaps = np.isnan(scores[1:])
        if gaps.any():
            frame = segment.start + 1 + int(np.flatnonzero(gaps)[0])
            raise PipelineError(f"frame {frame} lacks a change score")
    cps = np.asarray(binarize_changes(scores, params.delta_min), dtype=np.int64)
    n_cp = cps.size

    # Gate: every existing frame within context_radius of the change must be
    # confident. Out-of-segment context is vacuously fine.
    padded = np.ones(m + 2 * radius, dtype=bool)
    padded[radius : radius + m] = confident
    ctx_ok = np.ones(m, dtype=bool)
    for off in range(-radius, radius + 1):
        if off:
            ctx_ok &= padded[radius + off : radius + off + m]

    gate = ctx_ok[cps]
    pre_t = np.full(n_cp, _NO_LABEL, dtype=np.int64)
    post_t = np.full(n_cp, _NO_LABEL, dtype=np.int64)
    if n_cp:
        pre_t = np.where(gate, decisions[cps - 1], _NO_LABEL)
        has_post = cps < m - 1
        post_t = np.where(gate & has_post, decisions[np.minimum(cps + 1, m - 1)], _NO_LABEL)
    change_points = tuple(
        ChangePoint(
            frame_index=segment.start + int(t),
            pre_label=None if pre_t[i] < 0 else int(pre_t[i]),
            post_label=None if post_t[i] < 0 else int(post_t[i]),
        )
        for i, t in enumerate(cps)
    )

    state = np.full(m, _NO_LABEL, dtype=np.int64)
    source = np.zeros(m, dtype=np.uint8)
    claimed = np.zeros(m, dtype=bool)
    drafts: list[tuple[str, np.ndarray]] = []

    # (a) confident changes label their context; unconfident ones queue the
    # whole window, change frame included.
    offsets = np.r_[np.arange(-radius, 0), np.arange(1, radius + 1)]
    gated = cps[gate]
    if gated.size:
        ctx = (gated[:, None] + offsets).ravel()
        ctx = ctx[(ctx >= 0) & (ctx < m)]
        state[ctx] = decisions[ctx]
        source[ctx] = CODE_CONFIDENT
    for t in cps[~gate]:
        window = np.arange(max(int(t) - radius, 0), min(int(t) + radius, m - 1) + 1)
        window = window[~claimed[window]]
        if window.size:
            claimed[window] = True
            drafts.append((REASON_UNCONFIDENT, window))

    # (b) spans between change points; each span owns its opening change
    # frame. A closed end must testify, and two closed ends must agree;
    # the outermost spans have one open end each.
    lo = np.r_[0, cps]
    hi = np.r_[cps, m]
    left_val = np.r_[_NO_LABEL, post_t]
    right_val = np.r_[pre_t, _NO_LABEL]
    left_open = np.r_[True, np.zeros(n_cp, dtype=bool)]
    right_open = np.r_[np.zeros(n_cp, dtype=bool), True]
    verified = np.ones(n_cp + 1, dtype=bool)
    verified &= left_open | (left_val >= 0)
    verified &= right_open | (right_val >= 0)
    closed_both = ~left_open & ~right_open
    verified &= ~closed_both | (left_val == right_val)

    for i in np.flatnonzero(~verified):
        span = np.arange(lo[i], hi[i])
        span = span[~claimed[span]]
        if span.size:
            claimed[span] = True
            drafts.append((REASON_UNVERIFIED, span))

    # (c) stability check on the spans that survived verification.
    log_v_min = float(np.log(params.v_u_min))
    for i in np.flatnonzero(verified):
        a, b = int(lo[i]), int(hi[i])
        obs = decisions[a:b]
        key = obs.tobytes()
        score = cache.get(key)
        if score is None:
            score = stable_state_score(model, obs)
            cache[key] = score
        if score.log_v_u >= log_v_min:
            span_src = source[a:b]
            span_state = state[a:b]
            open_slots = span_src == CODE_NONE
            span_state[open_slots] = score.best_state
            span_src[open_slots] = CODE_STABLE
        else:
            span = np.arange(a, b)
            span = span[~claimed[span]]
            if span.size:
                claimed[span] = True
                drafts.append((REASON_UNSTABLE, span))

    packets = tuple(
        AnnotationPacket(
            packet_id=first_packet_id + j,
            reason=reason,
            frames=tuple(int(segment.start + p) for p in span),
            segment_id=segment_id,
        )
        for j, (reason, span) in enumerate(drafts)
    )
    return SegmentPlan(segment_id, segment, change_points, packets, state, source)


@dataclass(frozen=True)
class AnnotationRun:
    """Finalized labels plus every decision the pipeline made to get them."""

    states: StateSpace
    params: PipelineParams
    segments: tuple[Segment, ...]
    change_points: tuple[ChangePoint, ...]
    packets: tuple[AnnotationPacket, ...]
    label_frames: np.ndarray
    label_states: np.ndarray
    label_sources: np.ndarray
    retrain_count: int

    def __post_init__(self) -> None:
        for arr in (self.label_frames, self.label_states, self.label_sources):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return int(self.label_frames.shape[0])

    def labels(self) -> Iterator[LabelRecord]:
        for i in range(len(self)):
            yield LabelRecord(
                frame_index=int(self.label_frames[i]),
                state=int(self.label_states[i]),
                source=SOURCE_BY_CODE[int(self.label_sources[i])],
            )

    def label_at(self, frame_index: int) -> LabelRecord:
        i = int(np.searchsorted(self.label_frames, frame_index))
        if i >= len(self) or self.label_frames[i] != frame_index:
            raise KeyError(f"no label for frame {frame_index}")
        return LabelRecord(
            frame_index=frame_index,
            state=int(self.label_states[i]),
            source=SOURCE_BY_CODE[int(self.label_sources[i])],
        )

    def source_counts(self) -> dict[str, int]:
        return {
            name: int((self.label_sources == code).sum())
            for code, name in SOURCE_BY_CODE.items()
        }

    @property
    def manual_frames(self) -> int:
        return int((self.label_sources == CODE_MANUAL).sum())

    def to_json(self) -> str:
        payload = {
            "states": list(self.states.names),
            "params": self.params.to_dict(),
            "segments": [[s.start, s.end] for s in self.segments],
            "change_points": [
                [c.frame_index, c.pre_label, c.post_label] for c in self.change_points
            ],
            "packets": [
                [p.packet_id, p.reason, p.segment_id, list(p.frames)] for p in self.packets
            ],
            "label_frames": self.label_frames.tolist(),
            "label_states": self.label_states.tolist(),
            "label_sources": self.label_sources.tolist(),
            "source_legend": {str(code): name for code, name in SOURCE_BY_CODE.items()},
            "retrain_count": self.retrain_count,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def truth_annotator(stream: RecordStream) -> Callable[[AnnotationPacket], list[LabelRecord]]:
    """Annotator that answers every packet from the stream's ground truth."""
    if np.any(stream.truth[stream.present] < 0):
        raise ValueError("stream lacks ground truth on a present frame")

    def annotate(packet: AnnotationPacket) -> list[LabelRecord]:
        pos = np.searchsorted(stream.frame_index, packet.frames)
        return [
            LabelRecord(int(f), int(stream.truth[p]), SOURCE_MANUAL)
            for f, p in zip(packet.frames, pos)
        ]

    return annotate


def _batch_dispatch(annotator) -> Callable[[list[AnnotationPacket]], list]:
    batch = getattr(annotator, "annotate_batch", None)
    if callable(batch):
        return batch

    def one_by_one(packets: list[AnnotationPacket]) -> list:
        return [annotator(p) for p in packets]

    return one_by_one


def _checked_answers(size: int, packets: Sequence[AnnotationPacket], raw) -> list[np.ndarray]:
    answers = list(raw)
    if len(answers) != len(packets):
        raise AnnotatorContractError(
            f"annotator returned {len(answers)} answers for {len(packets)} packets"
        )
    out = []
    for packet, answer in zip(packets, answers):
        got: dict[int, int] = {}
        for rec in answer:
            frame = int(rec.frame_index)
            label = int(rec.state)
            if frame in got:
                raise AnnotatorContractError(
                    f"packet {packet.packet_id}: duplicate label for frame {frame}"
                )
            if not 0 <= label < size:
                raise AnnotatorContractError(
                    f"packet {packet.packet_id}: state {label} out of range"
                )
            got[frame] = label
        if set(got) != set(packet.frames):
            missing = sorted(set(packet.frames) - set(got))[:4]
            extra = sorted(set(got) - set(packet.frames))[:4]
            raise AnnotatorContractError(
                f"packet {packet.packet_id}: answer must cover exactly the queued"
                f" frames (missing {missing}, unexpected {extra})"
            )
        out.append(np.array([got[f] for f in packet.frames], dtype=np.int64))
    return out


def run_pipeline(
    records: RecordStream,
    initial_model: HmmModel | None,
    params: PipelineParams,
    annotator,
    *,
    seed_frames: int = 20000,
) -> AnnotationRun:
    """Drive the full annotation loop over every segment of the stream.

    With no initial model the first seed_frames in-segment frames are sent
    to the annotator as reason="seed" packets and the model is estimated
    from their answers (emission from argmax-decision/label pairs). The
    annotator is either a callable packet -> list[LabelRecord] or an object
    with annotate_batch(packets) -> list of such lists. Model priors and
    transitions are re-estimated from all finalized labels every time the
    manual label count crosses a retrain_interval multiple, taking effect
    from the next segment; the emission matrix is kept.
    """
    states = records.states
    if initial_model is not None and initial_model.states != states:
        raise PipelineError("model and stream disagree on the state space")
    segments = segment_frames(records)
    dispatch = _batch_dispatch(annotator)

    unit_frames: list[np.ndarray] = []
    unit_states: list[np.ndarray] = []
    unit_sources: list[np.ndarray] = []
    all_change_points: list[ChangePoint] = []
    all_packets: list[AnnotationPacket] = []
    label_sequences: list[np.ndarray] = []
    manual_count = 0
    retrain_count = 0
    packet_seq = 0

    def build_partial() -> AnnotationRun:
        return _assemble_run(
            states,
            params,
            segments,
            all_change_points,
            all_packets,
            unit_frames,
            unit_states,
            unit_sources,
            retrain_count,
        )

    def answered(packets: list[AnnotationPacket]) -> list[np.ndarray]:
        if not packets:
            return []
        try:
            raw = dispatch(packets)
            return _checked_answers(states.size, packets, raw)
        except AnnotationAborted:
            raise
        except Exception as err:
            raise AnnotationAborted(f"annotator failed: {err}", build_partial()) from err

    model = initial_model
    work: list[tuple[int, Segment]] = []
    if model is None:
        if seed_frames < 1:
            raise PipelineError("an initial model or a positive seed budget is required")
        remaining = seed_frames
        seed_jobs: list[tuple[int, Segment]] = []
        for sid, segment in enumerate(segments):
            if remaining <= 0:
                work.append((sid, segment))
                continue
            take = min(len(segment), remaining)
            remaining -= take
            seed_jobs.append((sid, Segment(segment.start, segment.start + take - 1)))
            if take < len(segment):
                work.append((sid, Segment(segment.start + take, segment.end)))
        seed_packets = []
        for sid, part in seed_jobs:
            seed_packets.append(
                AnnotationPacket(
                    packet_id=packet_seq,
                    reason=REASON_SEED,
                    frames=tuple(range(part.start, part.end + 1)),
                    segment_id=sid,
                )
            )
            packet_seq += 1
        answers = answered(seed_packets)
        seed_decisions: list[np.ndarray] = []
        for (sid, part), packet, labels in zip(seed_jobs, seed_packets, answers):
            pa = records.position(part.start)
            unit_frames.append(np.arange(part.start, part.end + 1, dtype=np.int64))
            unit_states.append(labels)
            unit_sources.append(np.full(len(part), CODE_MANUAL, dtype=np.uint8))
            all_packets.append(packet)
            label_sequences.append(labels)
            seed_decisions.append(records.probs[pa : pa + len(part)].argmax(axis=1))
            manual_count += len(part)
        if manual_count == 0:
            raise PipelineError("stream has no in-segment frames to seed from")
        emission = estimate_emission(
            states,
            np.concatenate(seed_decisions),
            np.concatenate(label_sequences),
            params.smoothing_alpha,
        )
        model = estimate_model(states, label_sequences, params.smoothing_alpha, emission)
    else:
        work = list(enumerate(segments))

    next_retrain = (manual_count // params.retrain_interval + 1) * params.retrain_interval
    cache: dict[bytes, StableScore] = {}
    for sid, segment in work:
        plan = process_segment(records, segment, model, params, sid, packet_seq, cache)
        packet_seq += len(plan.packets)
        answers = answered(list(plan.packets))
        for packet, labels in zip(plan.packets, answers):
            local = np.asarray(packet.frames, dtype=np.int64) - segment.start
            plan.states[local] = labels
            plan.sources[local] = CODE_MANUAL
            manual_count += len(packet.frames)
        if np.any(plan.sources == CODE_NONE):
            missed = segment.start + int(np.flatnonzero(plan.sources == CODE_NONE)[0])
            raise PipelineError(f"frame {missed} was left unlabeled")
        unit_frames.append(np.arange(segment.start, segment.end + 1, dtype=np.int64))
        unit_states.append(plan.states)
        unit_sources.append(plan.sources)
        all_change_points.extend(plan.change_points)
        all_packets.extend(plan.packets)
        label_sequences.append(plan.states)
        if manual_count >= next_retrain:
            model = estimate_model(
                states, label_sequences, params.smoothing_alpha, model.emission
            )
            retrain_count += 1
            next_retrain = (
                manual_count // params.retrain_interval + 1
            ) * params.retrain_interval
            cache = {}
    return _assemble_run(
        states,
        params,
        segments,
        all_change_points,
        all_packets,
        unit_frames,
        unit_states,
        unit_sources,
        retrain_count,
    )


def _assemble_run(
    states: StateSpace,
    params: PipelineParams,
    segments: tuple[Segment, ...],
    change_points: list[ChangePoint],
    packets: list[AnnotationPacket],
    unit_frames: list[np.ndarray],
    unit_states: list[np.ndarray],
    unit_sources: list[np.ndarray],
    retrain_count: int,
) -> AnnotationRun:
    if unit_frames:
        frames = np.concatenate(unit_frames)
        labels = np.concatenate(unit_states)
        sources = np.concatenate(unit_sources)
    else:
        frames = np.empty(0, dtype=np.int64)
        labels = np.empty(0, dtype=np.int64)
        sources = np.empty(0, dtype=np.uint8)
    if frames.size and np.any(np.diff(frames) <= 0):
        raise PipelineError("finalized labels are not in frame order")
    return AnnotationRun(
        states=states,
        params=params,
        segments=segments,
        change_points=tuple(change_points),
        packets=tuple(packets),
        label_frames=frames,
        label_states=labels.astype(np.int64, copy=False),
        label_sources=sources,
        retrain_count=retrain_count,
    )
