"""Hidden Markov model core for discrete-state frame annotation.

Everything here is a pure function over immutable values. Probabilities are
kept in log space throughout; a hard zero becomes ``-inf`` and is never
clamped or renormalized. Viterbi ties resolve to the lowest state index so
that decoding is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# Row-stochastic tolerance shared by model validation and estimation.
ROW_SUM_TOL = 1e-9


class ImpossibleObservationError(ValueError):
    """Every state path assigns the observation sequence probability zero."""


class EstimationError(ValueError):
    """Nothing to count and no smoothing mass to fall back on."""


@dataclass(frozen=True)
class StateSpace:
    """Ordered alphabet of discrete states; index i names states[i]."""

    names: tuple[str, ...]

    def __post_init__(self) -> None:
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("a state space needs at least two states")
        if len(set(names)) != len(names):
            raise ValueError("state names must be unique")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown state name: {name!r}") from None


def _stochastic(matrix, n_rows: int, n_cols: int, what: str) -> np.ndarray:
    a = np.asarray(matrix, dtype=np.float64)
    if a.shape != (n_rows, n_cols):
        raise ValueError(f"{what} must have shape {(n_rows, n_cols)}, got {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < 0.0):
        raise ValueError(f"{what} entries must be finite and non-negative")
    sums = a.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > ROW_SUM_TOL):
        raise ValueError(f"every {what} row must sum to 1 within {ROW_SUM_TOL}")
    a = a.copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HmmModel:
    """Priors, transitions and an emission (confusion) matrix over one alphabet.

    transitions[i, j] is P(next=j | current=i); emission[k, y] is the
    probability that the classifier reports y when the true state is k.
    """

    states: StateSpace
    priors: np.ndarray
    transitions: np.ndarray
    emission: np.ndarray

    def __post_init__(self) -> None:
        n = self.states.size
        object.__setattr__(self, "priors", _stochastic([self.priors], 1, n, "priors")[0])
        object.__setattr__(self, "transitions", _stochastic(self.transitions, n, n, "transitions"))
        object.__setattr__(self, "emission", _stochastic(self.emission, n, n, "emission"))
        with np.errstate(divide="ignore"):
            for name, value in (
                ("log_priors", np.log(self.priors)),
                ("log_transitions", np.log(self.transitions)),
                ("log_emission", np.log(self.emission)),
            ):
                value.setflags(write=False)
                object.__setattr__(self, name, value)

    # Filled in by __post_init__; declared for type checkers.
    log_priors: np.ndarray = None  # type: ignore[assignment]
    log_transitions: np.ndarray = None  # type: ignore[assignment]
    log_emission: np.ndarray = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ObservationSequence:
    """Non-empty sequence of classifier decisions (state indices)."""

    decisions: tuple[int, ...]

    def __post_init__(self) -> None:
        decisions = tuple(int(d) for d in self.decisions)
        object.__setattr__(self, "decisions", decisions)
        if not decisions:
            raise ValueError("observation sequence must be non-empty")
        if any(d < 0 for d in decisions):
            raise ValueError("observations must be non-negative state indices")

    def __len__(self) -> int:
        return len(self.decisions)


@dataclass(frozen=True)
class DecodeResult:
    """Most probable state path and its log probability."""

    path: tuple[int, ...]
    log_v_star: float


@dataclass(frozen=True)
class StableScore:
    """Best single-state hypothesis for a sequence.

    v_u is the unchanged-state probability normalized by the Viterbi path
    probability; it can exceed 1 because the unchanged recursion carries no
    prior factor, and it can overflow to inf on long sequences. log_v_u is
    the overflow-free equivalent used for threshold comparisons.
    """

    best_state: int
    v_u: float
    log_v_u: float


def _as_indices(obs, n_states: int) -> np.ndarray:
    if isinstance(obs, ObservationSequence):
        y = np.asarray(obs.decisions, dtype=np.int64)
    else:
        y = np.asarray(obs, dtype=np.int64)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("observations must be a non-empty 1-d sequence")
    if y.min() < 0 or y.max() >= n_states:
        raise ValueError(f"observation index out of range for {n_states} states")
    return y


def viterbi(model: HmmModel, obs) -> DecodeResult:
    """Most probable state path for obs, ties broken to the lowest index.

    Raises ImpossibleObservationError when every path has probability zero;
    a silent all--inf path is never returned.
    """
    n = model.states.size
    y = _as_indices(obs, n)
    m = y.size
    log_a = model.log_transitions
    log_e = model.log_emission

    v = model.log_priors + log_e[:, y[0]]
    back = np.empty((m, n), dtype=np.int32)
    for t in range(1, m):
        step = v[:, None] + log_a  # [from, to]
        back[t] = step.argmax(axis=0)
        v = step.max(axis=0) + log_e[:, y[t]]

    final = int(v.argmax())
    if v[final] == -np.inf:
        raise ImpossibleObservationError(
            "observation sequence has probability zero under every state path"
        )
    path = np.empty(m, dtype=np.int64)
    path[m - 1] = final
    for t in range(m - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return DecodeResult(path=tuple(int(s) for s in path), log_v_star=float(v[final]))


def unchanged_log_prob(model: HmmModel, obs, state: int) -> float:
    """Log probability that obs was emitted without ever leaving `state`.

    First factor carries no prior, by construction: the hypothesis is scored
    relative to the Viterbi probability, not as a posterior. A zero factor
    yields -inf.
    """
    n = model.states.size
    y = _as_indices(obs, n)
    if not 0 <= state < n:
        raise ValueError(f"state index {state} out of range")
    e_row = model.log_emission[state]
    return float(e_row[y].sum() + (y.size - 1) * model.log_transitions[state, state])


def stable_state_score(model: HmmModel, obs) -> StableScore:
    """Best unchanged-state hypothesis normalized by the Viterbi probability."""
    n = model.states.size
    y = _as_indices(obs, n)
    per_state = model.log_emission[:, y].sum(axis=1) + (y.size - 1) * np.diag(
        model.log_transitions
    )
    best = int(per_state.argmax())
    log_ratio = float(per_state[best] - viterbi(model, y).log_v_star)
    with np.errstate(over="ignore"):
        v_u = float(np.exp(log_ratio))
    return StableScore(best_state=best, v_u=v_u, log_v_u=log_ratio)


def _smooth_rows(counts: np.ndarray, alpha: float) -> np.ndarray:
    n = counts.shape[-1]
    totals = counts.sum(axis=-1, keepdims=True)
    out = np.empty_like(counts, dtype=np.float64)
    denom = totals + alpha * n
    with np.errstate(invalid="ignore"):
        np.divide(counts + alpha, denom, out=out, where=denom > 0)
    # A state never observed as a source gets a uniform row so the model
    # stays row-stochastic even with alpha = 0.
    empty = (denom == 0).reshape(-1)
    if np.any(empty):
        out[empty.reshape(counts.shape[:-1])] = 1.0 / n
    return out


def estimate_model(
    states: StateSpace,
    segments: Iterable[Sequence[int]],
    alpha: float = 1.0,
    emission=None,
) -> HmmModel:
    """Count-based priors and transitions with additive smoothing alpha.

    Priors come from segment-initial states, transitions from consecutive
    pairs within each segment. `emission` passes through unchanged (identity
    when omitted); use estimate_emission to fit it from labeled decisions.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    n = states.size
    initial = np.zeros(n, dtype=np.float64)
    trans = np.zeros(n * n, dtype=np.float64)
    n_segments = 0
    for segment in segments:
        seg = _as_indices(segment, n)
        initial[seg[0]] += 1.0
        n_segments += 1
        if seg.size > 1:
            trans += np.bincount(seg[:-1] * n + seg[1:], minlength=n * n)
    if n_segments == 0 and alpha == 0:
        raise EstimationError("no labeled segments and no smoothing mass")
    priors = (initial + alpha) / (n_segments + alpha * n)
    transitions = _smooth_rows(trans.reshape(n, n), alpha)
    if emission is None:
        emission = np.eye(n)
    return HmmModel(states, priors, transitions, emission)


def estimate_emission(
    states: StateSpace,
    predicted: Sequence[int],
    truth: Sequence[int],
    alpha: float = 1.0,
) -> np.ndarray:
    """Confusion matrix rows P(predicted | true) with additive smoothing."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    n = states.size
    pred = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predicted and truth must be parallel 1-d sequences")
    if pred.size == 0:
        if alpha == 0:
            raise EstimationError("no labeled pairs and no smoothing mass")
        return np.full((n, n), 1.0 / n)
    if pred.min() < 0 or pred.max() >= n or true.min() < 0 or true.max() >= n:
        raise ValueError(f"label index out of range for {n} states")
    counts = np.bincount(true * n + pred, minlength=n * n).reshape(n, n)
    return _smooth_rows(counts.astype(np.float64), alpha)
