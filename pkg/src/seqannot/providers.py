"""Frame record streams: simulation, parsing, serialization.

A stream is stored columnar (one numpy array per field) so that million-frame
runs stay cheap; ``FrameRecord`` is a per-frame view used at the API surface.

Absent values are encoded as NaN (floats) or -1 (ground truth). The text
format is tab-separated with a ``states`` header row and the literal string
``null`` for missing fields; floats are written with ``repr`` so a
parse/serialize cycle is byte identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy.stats import norm

from .hmm import StateSpace

PROB_SUM_TOL = 1e-6

DEFAULT_STATE_NAMES = (
    "Road",
    "Center Stack",
    "Instrument Cluster",
    "Rearview Mirror",
    "Left",
    "Right",
)


class RecordFormatError(ValueError):
    """Raised when record text cannot be parsed."""


@dataclass(frozen=True)
class FrameRecord:
    frame_index: int
    object_present: bool
    class_probs: tuple[float, ...] | None
    change_score: float | None
    ground_truth: int | None


@dataclass(frozen=True, eq=False)
class RecordStream:
    """Columnar frame records over a fixed state space.

    probs rows are NaN where the tracked object is absent, score is NaN
    where undefined, truth is -1 where unknown.
    """

    states: StateSpace
    frame_index: np.ndarray
    present: np.ndarray
    probs: np.ndarray
    score: np.ndarray
    truth: np.ndarray

    def __post_init__(self) -> None:
        n = self.frame_index.shape[0]
        if n == 0:
            raise ValueError("record stream must contain at least one frame")
        shapes = (self.present.shape, self.score.shape, self.truth.shape)
        if shapes != ((n,), (n,), (n,)) or self.probs.shape != (n, self.states.size):
            raise ValueError("record stream columns have inconsistent shapes")
        if np.any(np.diff(self.frame_index) <= 0):
            raise ValueError("frame indices must be strictly increasing")
        defined = ~np.isnan(self.probs).any(axis=1)
        if not np.array_equal(defined, self.present):
            raise ValueError("class probabilities must be present exactly on present frames")
        if np.isnan(self.probs[self.present]).any():
            raise ValueError("class probabilities may not mix values and NaN within a frame")
        row = self.probs[self.present]
        if row.size:
            if np.any(row < 0.0) or np.any(row > 1.0):
                raise ValueError("class probabilities must lie in [0, 1]")
            if np.any(np.abs(row.sum(axis=1) - 1.0) > PROB_SUM_TOL):
                raise ValueError("class probabilities must sum to 1")
        has_score = ~np.isnan(self.score)
        adjacent = np.zeros(n, dtype=bool)
        adjacent[1:] = (
            self.present[1:] & self.present[:-1] & (np.diff(self.frame_index) == 1)
        )
        if np.any(has_score & ~adjacent):
            raise ValueError(
                "change scores require a present frame whose predecessor index is also present"
            )
        defined_scores = self.score[has_score]
        if np.any(defined_scores < 0.0) or np.any(defined_scores > 1.0):
            raise ValueError("change scores must lie in [0, 1]")
        if np.any(self.truth < -1) or np.any(self.truth >= self.states.size):
            raise ValueError("ground truth labels out of range")
        for arr in (self.frame_index, self.present, self.probs, self.score, self.truth):
            arr.setflags(write=False)

    @classmethod
    def from_records(cls, states: StateSpace, records: Sequence[FrameRecord]) -> "RecordStream":
        n = len(records)
        if n == 0:
            raise ValueError("record stream must contain at least one frame")
        probs = np.full((n, states.size), np.nan)
        score = np.full(n, np.nan)
        truth = np.full(n, -1, dtype=np.int64)
        index = np.empty(n, dtype=np.int64)
        present = np.empty(n, dtype=bool)
        for i, rec in enumerate(records):
            index[i] = rec.frame_index
            present[i] = rec.object_present
            if rec.object_present != (rec.class_probs is not None):
                raise ValueError(
                    f"frame {rec.frame_index}: class_probs present iff object_present"
                )
            if rec.class_probs is not None:
                probs[i] = rec.class_probs
            if rec.change_score is not None:
                score[i] = rec.change_score
            if rec.ground_truth is not None:
                truth[i] = rec.ground_truth
        return cls(states, index, present, probs, score, truth)

    def __len__(self) -> int:
        return int(self.frame_index.shape[0])

    def record(self, i: int) -> FrameRecord:
        present = bool(self.present[i])
        score = self.score[i]
        truth = int(self.truth[i])
        return FrameRecord(
            frame_index=int(self.frame_index[i]),
            object_present=present,
            class_probs=tuple(float(p) for p in self.probs[i]) if present else None,
            change_score=None if np.isnan(score) else float(score),
            ground_truth=None if truth < 0 else truth,
        )

    def __iter__(self) -> Iterator[FrameRecord]:
        return (self.record(i) for i in range(len(self)))

    def position(self, frame_index: int) -> int:
        i = int(np.searchsorted(self.frame_index, frame_index))
        if i >= len(self) or self.frame_index[i] != frame_index:
            raise KeyError(f"no record with frame index {frame_index}")
        return i

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RecordStream):
            return NotImplemented
        return (
            self.states == other.states
            and np.array_equal(self.frame_index, other.frame_index)
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.probs, other.probs, equal_nan=True)
            and np.array_equal(self.score, other.score, equal_nan=True)
            and np.array_equal(self.truth, other.truth)
        )


# --- text format ---------------------------------------------------------------


def serialize_records(stream: RecordStream) -> str:
    names = stream.states.names
    lines = ["states\t" + "\t".join(names)]
    null_probs = ["null"] * stream.states.size
    for i in range(len(stream)):
        present = bool(stream.present[i])
        fields = [str(int(stream.frame_index[i])), "1" if present else "0"]
        fields += [repr(float(p)) for p in stream.probs[i]] if present else null_probs
        score = stream.score[i]
        fields.append("null" if np.isnan(score) else repr(float(score)))
        truth = int(stream.truth[i])
        fields.append("null" if truth < 0 else names[truth])
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def parse_records(text: str) -> RecordStream:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise RecordFormatError("line 1: empty input, expected a states header")
    header = lines[0].split("\t")
    if header[0] != "states" or len(header) < 3:
        raise RecordFormatError(
            "line 1: header must be 'states' followed by two or more state names"
        )
    try:
        states = StateSpace(tuple(header[1:]))
    except ValueError as err:
        raise RecordFormatError(f"line 1: {err}") from None
    if len(lines) == 1:
        raise RecordFormatError("line 2: expected at least one record")
    n, size = len(lines) - 1, states.size
    name_to_index = {name: k for k, name in enumerate(states.names)}
    index = np.empty(n, dtype=np.int64)
    present = np.empty(n, dtype=bool)
    probs = np.full((n, size), np.nan)
    score = np.full(n, np.nan)
    truth = np.full(n, -1, dtype=np.int64)
    expected = 4 + size
    for i, line in enumerate(lines[1:]):
        where = f"line {i + 2}"
        fields = line.split("\t")
        if len(fields) != expected:
            raise RecordFormatError(
                f"{where}: field count is {len(fields)}, expected {expected}"
            )
        try:
            index[i] = int(fields[0])
        except ValueError:
            raise RecordFormatError(f"{where}: frame_index {fields[0]!r} is not an integer") from None
        if fields[1] not in ("0", "1"):
            raise RecordFormatError(f"{where}: object_present must be 0 or 1, got {fields[1]!r}")
        present[i] = fields[1] == "1"
        prob_fields = fields[2 : 2 + size]
        nulls = sum(f == "null" for f in prob_fields)
        if present[i]:
            if nulls:
                raise RecordFormatError(f"{where}: class_probs missing on a present frame")
            try:
                row = [float(f) for f in prob_fields]
            except ValueError:
                raise RecordFormatError(f"{where}: class_probs contain a non-numeric field") from None
            total = sum(row)
            if abs(total - 1.0) > PROB_SUM_TOL or min(row) < 0.0:
                raise RecordFormatError(
                    f"{where}: class_probs sum to {total!r}, expected 1 within {PROB_SUM_TOL}"
                )
            probs[i] = row
        elif nulls != size:
            raise RecordFormatError(f"{where}: class_probs given on an absent frame")
        if fields[2 + size] != "null":
            try:
                value = float(fields[2 + size])
            except ValueError:
                raise RecordFormatError(f"{where}: change_score is not a number") from None
            if not 0.0 <= value <= 1.0:
                raise RecordFormatError(f"{where}: change_score {value!r} outside [0, 1]")
            if i == 0 or not (present[i] and present[i - 1] and index[i] - index[i - 1] == 1):
                raise RecordFormatError(
                    f"{where}: change_score requires an adjacent present predecessor"
                )
            score[i] = value
        if fields[3 + size] != "null":
            k = name_to_index.get(fields[3 + size])
            if k is None:
                raise RecordFormatError(
                    f"{where}: ground_truth {fields[3 + size]!r} is not a state name"
                )
            truth[i] = k
        if i and index[i] <= index[i - 1]:
            raise RecordFormatError(f"{where}: frame_index must increase")
    return RecordStream(states, index, present, probs, score, truth)


# --- simulator -------------------------------------------------------------------


def default_transitions(
    n: int,
    hub_diagonal: float = 0.96,
    diagonal: float = 0.5,
    hub_return: float = 0.98,
) -> np.ndarray:
    """Hub-and-glance transition matrix.

    State 0 is a long-dwell hub (mean run 1/(1-hub_diagonal) frames); the
    other states are short glances that return to the hub with probability
    hub_return when they end. Diagonals stay the largest entry in each row.
    """
    if n < 2:
        raise ValueError("need at least two states")
    for value in (hub_diagonal, diagonal):
        if not 0.0 < value < 1.0:
            raise ValueError("diagonals must be in (0, 1)")
    if not 0.0 <= hub_return <= 1.0:
        raise ValueError("hub_return must be a probability")
    out = np.zeros((n, n))
    out[0] = (1.0 - hub_diagonal) / (n - 1)
    out[0, 0] = hub_diagonal
    for k in range(1, n):
        leave = 1.0 - diagonal
        if n == 2:
            out[k, 0] = leave
        else:
            out[k, 0] = leave * hub_return
            out[k, 1:] = leave * (1.0 - hub_return) / (n - 2)
        out[k, k] = diagonal
    return out


def default_emission(
    n: int, hub_diagonal: float = 0.85, diagonal_average: float = 0.754
) -> np.ndarray:
    """Confusion matrix whose diagonal averages exactly diagonal_average.

    The hub (state 0) is recognized at hub_diagonal; the glance states share
    the remaining diagonal budget evenly and their confusion mass leans 60%
    toward the hub, the way mistaken glances read as the dominant state.
    """
    if n < 2:
        raise ValueError("need at least two states")
    rest = (n * diagonal_average - hub_diagonal) / (n - 1)
    for value in (hub_diagonal, rest):
        if not 0.0 < value < 1.0:
            raise ValueError("diagonals must be in (0, 1)")
    out = np.zeros((n, n))
    out[0] = (1.0 - hub_diagonal) / (n - 1)
    out[0, 0] = hub_diagonal
    for k in range(1, n):
        off = 1.0 - rest
        if n == 2:
            out[k, 0] = off
        else:
            out[k, 0] = off * 0.6
            out[k, 1:] = off * 0.4 / (n - 2)
        out[k, k] = rest
    return out


@dataclass(frozen=True)
class SimConfig:
    """Everything a reproducible synthetic stream needs.

    change_tpr / change_fpr anchor the detector score distributions so that
    thresholding at 0.5 hits exactly those rates; score_noise widens the
    transition lobe so stricter thresholds miss real changes progressively.
    decision_coherence is the probability that a frame repeats its dwell's
    one shared classifier decision instead of drawing fresh: real per-frame
    classifiers fail on whole glances, not on independent frames, and the
    per-frame confusion marginal is unchanged by it.
    """

    length: int
    seed: int
    states: tuple[str, ...] = DEFAULT_STATE_NAMES
    true_transitions: np.ndarray | None = None
    emission: np.ndarray | None = None
    presence_rate: float = 0.794
    change_tpr: float = 0.70
    change_fpr: float = 0.002
    score_noise: float = 0.2
    decision_coherence: float = 0.95
    confident_ratio_range: tuple[float, float] = (12.0, 200.0)
    unconfident_ratio_range: tuple[float, float] = (1.3, 9.0)
    conf_rate_correct: float = 0.999
    conf_rate_incorrect: float = 0.998

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError("length must be positive")
        if not 0.0 < self.presence_rate <= 1.0:
            raise ValueError("presence_rate must be in (0, 1]")
        if not 0.0 <= self.change_tpr <= 1.0 or not 0.0 <= self.change_fpr <= 0.5:
            raise ValueError("change_tpr in [0, 1] and change_fpr in [0, 0.5] required")
        if self.score_noise < 0.0:
            raise ValueError("score_noise must be non-negative")
        if not 0.0 <= self.decision_coherence <= 1.0:
            raise ValueError("decision_coherence must be a probability")
        for lo, hi in (self.confident_ratio_range, self.unconfident_ratio_range):
            if not 1.0 <= lo <= hi:
                raise ValueError("ratio ranges must satisfy 1 <= lo <= hi")
        for rate in (self.conf_rate_correct, self.conf_rate_incorrect):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("confidence rates must be probabilities")

    def resolved(self) -> tuple[StateSpace, np.ndarray, np.ndarray]:
        states = StateSpace(self.states)
        trans = self.true_transitions
        trans = default_transitions(states.size) if trans is None else np.asarray(trans, float)
        emission = self.emission
        emission = default_emission(states.size) if emission is None else np.asarray(emission, float)
        for name, matrix in (("true_transitions", trans), ("emission", emission)):
            if matrix.shape != (states.size, states.size):
                raise ValueError(f"{name} must be square over the state space")
            if np.any(matrix < 0) or np.any(np.abs(matrix.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError(f"{name} rows must be probability distributions")
        return states, trans, emission


def _sample_chain(rng: np.random.Generator, trans: np.ndarray, n: int) -> np.ndarray:
    """Dwell-run sampling: geometric run lengths, then a jump off the diagonal."""
    size = trans.shape[0]
    diag = np.diag(trans)
    out = np.empty(n, dtype=np.int64)
    state = int(rng.integers(size))
    pos = 0
    while pos < n:
        leave = 1.0 - diag[state]
        run = n - pos if leave <= 0.0 else min(int(rng.geometric(leave)), n - pos)
        out[pos : pos + run] = state
        pos += run
        if pos < n:
            row = trans[state].copy()
            row[state] = 0.0
            state = int(rng.choice(size, p=row / row.sum()))
    return out


def _inverse_cdf_draw(rng: np.random.Generator, rows: np.ndarray) -> np.ndarray:
    cdf = rows.cumsum(axis=1)
    picks = (rng.random(rows.shape[0])[:, None] > cdf).sum(axis=1)
    return np.minimum(picks, rows.shape[1] - 1)


def simulate_records(config: SimConfig) -> RecordStream:
    states, trans, emission = config.resolved()
    rng = np.random.default_rng(config.seed)
    n, size = config.length, states.size

    truth = _sample_chain(rng, trans, n)
    present = rng.random(n) < config.presence_rate

    # Classifier decisions: one shared draw per dwell plus per-frame fresh
    # draws, mixed by decision_coherence. Marginally each frame's decision
    # follows its true state's emission row either way.
    is_transition = np.zeros(n, dtype=bool)
    is_transition[1:] = truth[1:] != truth[:-1]
    dwell_id = np.cumsum(is_transition)
    dwell_first = np.flatnonzero(np.r_[True, is_transition[1:]])
    dwell_decision = _inverse_cdf_draw(rng, emission[truth[dwell_first]])
    fresh_decision = _inverse_cdf_draw(rng, emission[truth])
    coherent = rng.random(n) < config.decision_coherence
    decisions = np.where(coherent, dwell_decision[dwell_id], fresh_decision)

    correct = decisions == truth
    confident = rng.random(n) < np.where(
        correct, config.conf_rate_correct, config.conf_rate_incorrect
    )
    lo = np.where(confident, config.confident_ratio_range[0], config.unconfident_ratio_range[0])
    hi = np.where(confident, config.confident_ratio_range[1], config.unconfident_ratio_range[1])
    ratio = lo + rng.random(n) * (hi - lo)
    top = ratio / (ratio + size - 1)
    probs = np.repeat(((1.0 - top) / (size - 1))[:, None], size, axis=1)
    probs[np.arange(n), decisions] = top
    probs[~present] = np.nan

    # Change scores, anchored so a 0.5 threshold reproduces the configured
    # rates exactly: transitions get a Gaussian lobe whose mean is set by
    # change_tpr, everything else an exponential tail with P(>=0.5) == fpr.
    z = rng.standard_normal(n)
    if config.change_tpr >= 1.0:
        transition_scores = np.ones(n)
    elif config.change_tpr <= 0.0:
        transition_scores = np.zeros(n)
    else:
        mu = 0.5 + config.score_noise * norm.ppf(config.change_tpr)
        transition_scores = np.clip(mu + config.score_noise * z, 0.0, 1.0)
    if config.change_fpr <= 0.0:
        null_scores = np.zeros(n)
    else:
        scale = 0.5 / np.log(1.0 / config.change_fpr)
        null_scores = np.minimum(rng.exponential(scale, n), 1.0)
    score = np.where(is_transition, transition_scores, null_scores)
    scored = np.zeros(n, dtype=bool)
    scored[1:] = present[1:] & present[:-1]
    score[~scored] = np.nan

    return RecordStream(
        states=states,
        frame_index=np.arange(n, dtype=np.int64),
        present=present,
        probs=probs,
        score=score,
        truth=truth.copy(),
    )
