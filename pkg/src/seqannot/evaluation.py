"""Effort/accuracy evaluation of annotation runs.

replay_metrics drives the pipeline with an oracle that answers every packet
from ground truth, so manual labels are correct by construction and every
labeling error is attributable to an automatic source. sweep evaluates a
parameter grid and marks the points where no other point is at least as
good on both axes.
"""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .hmm import HmmModel
from .pipeline import (
    CODE_MANUAL,
    SOURCE_BY_CODE,
    AnnotationRun,
    PipelineParams,
    run_pipeline,
    truth_annotator,
)
from .providers import RecordStream, SimConfig, simulate_records

CSV_COLUMNS = (
    "delta_min",
    "c_min",
    "v_u_min",
    "total_frames",
    "manual_frames",
    "reduction_factor",
    "accuracy",
    "pareto",
)


@dataclass(frozen=True)
class TradeoffPoint:
    """One operating point: how much human effort bought how much accuracy.

    reduction_factor is total in-segment frames per manually labeled frame;
    a run needing no human at all reports the total itself and sets
    no_manual so the division-free case stays visible downstream.
    """

    params: PipelineParams
    total_frames: float
    manual_frames: float
    auto_frames: float
    reduction_factor: float
    accuracy: float
    no_manual: bool
    errors_by_source: dict[str, float]

    def __post_init__(self) -> None:
        if self.total_frames <= 0:
            raise ValueError("a tradeoff point needs at least one frame")
        if abs(self.manual_frames + self.auto_frames - self.total_frames) > 1e-9:
            raise ValueError("manual and auto frames must partition the total")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "total_frames": self.total_frames,
            "manual_frames": self.manual_frames,
            "auto_frames": self.auto_frames,
            "reduction_factor": self.reduction_factor,
            "accuracy": self.accuracy,
            "no_manual": self.no_manual,
            "errors_by_source": dict(self.errors_by_source),
        }


def run_metrics(records: RecordStream, run: AnnotationRun) -> TradeoffPoint:
    """Score a finished run against the stream's ground truth."""
    total = len(run)
    if total == 0:
        raise ValueError("stream has no in-segment frames to evaluate")
    pos = np.searchsorted(records.frame_index, run.label_frames)
    truth = records.truth[pos]
    if np.any(truth < 0):
        raise ValueError("stream lacks ground truth on a labeled frame")
    wrong = run.label_states != truth
    manual = run.manual_frames
    errors = {
        name: float((wrong & (run.label_sources == code)).sum())
        for code, name in SOURCE_BY_CODE.items()
    }
    return TradeoffPoint(
        params=run.params,
        total_frames=total,
        manual_frames=manual,
        auto_frames=total - manual,
        reduction_factor=total / manual if manual else float(total),
        accuracy=1.0 - float(wrong.sum()) / total,
        no_manual=manual == 0,
        errors_by_source=errors,
    )


def replay_metrics(
    records: RecordStream,
    model: HmmModel | None,
    params: PipelineParams,
    *,
    seed_frames: int = 20000,
) -> TradeoffPoint:
    """Run the pipeline to completion with the oracle annotator and score it.

    Ground truth is required on every in-segment frame. Without a model the
    run self-seeds; seed labels count as manual effort.
    """
    run = run_pipeline(
        records, model, params, truth_annotator(records), seed_frames=seed_frames
    )
    point = run_metrics(records, run)
    if point.errors_by_source[SOURCE_BY_CODE[CODE_MANUAL]]:
        raise AssertionError("oracle-labeled frames disagree with ground truth")
    return point


@dataclass(frozen=True)
class SweepSpec:
    """Grid of pipeline thresholds over one stream source.

    Exactly one of config (fresh simulation per repetition, seeds offset by
    the repetition index) or records (a fixed stream replayed as-is) feeds
    the sweep.
    """

    config: SimConfig | None = None
    records: RecordStream | None = None
    delta_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    c_min_grid: tuple[float, ...] = (10.0,)
    v_u_min_grid: tuple[float, ...] = (1.5,)
    repetitions: int = 1
    seed_frames: int = 20000
    context_radius: int = 2
    retrain_interval: int = 20000
    smoothing_alpha: float = 1.0

    def __post_init__(self) -> None:
        if (self.config is None) == (self.records is None):
            raise ValueError("exactly one of config or records must be given")
        for grid in (self.delta_grid, self.c_min_grid, self.v_u_min_grid):
            if not grid:
                raise ValueError("parameter grids must be non-empty")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    def grid_points(self) -> list[tuple[float, float, float]]:
        return [
            (delta, c, v)
            for delta in self.delta_grid
            for c in self.c_min_grid
            for v in self.v_u_min_grid
        ]


@dataclass(frozen=True)
class SweepFailure:
    delta_min: float
    c_min: float
    v_u_min: float
    message: str


@dataclass(frozen=True)
class SweepResult:
    points: tuple[TradeoffPoint, ...]
    pareto: tuple[bool, ...]
    failures: tuple[SweepFailure, ...]

    def frontier(self) -> tuple[TradeoffPoint, ...]:
        return tuple(p for p, keep in zip(self.points, self.pareto) if keep)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for point, keep in zip(self.points, self.pareto):
            writer.writerow(
                [
                    _number(point.params.delta_min),
                    _number(point.params.c_min),
                    _number(point.params.v_u_min),
                    _number(point.total_frames),
                    _number(point.manual_frames),
                    _number(point.reduction_factor),
                    _number(point.accuracy),
                    int(keep),
                ]
            )
        return out.getvalue()


def _number(x: float) -> str:
    value = float(x)
    return str(int(value)) if value.is_integer() else repr(value)


def pareto_mask(metrics: Sequence[tuple[float, float]]) -> tuple[bool, ...]:
    """True where no other point is >= on both axes and > on one."""
    mask = []
    for i, (a1, a2) in enumerate(metrics):
        dominated = any(
            b1 >= a1 and b2 >= a2 and (b1 > a1 or b2 > a2)
            for j, (b1, b2) in enumerate(metrics)
            if j != i
        )
        mask.append(not dominated)
    return tuple(mask)


def sweep(spec: SweepSpec) -> SweepResult:
    """Evaluate every grid point, averaging repetitions into one point each.

    A failing point is recorded and skipped; the rest of the grid still
    runs. Pareto flags are computed over the successful points only.
    """
    points: list[TradeoffPoint] = []
    failures: list[SweepFailure] = []
    for delta, c, v in spec.grid_points():
        try:
            params = PipelineParams(
                delta_min=delta,
                c_min=c,
                v_u_min=v,
                context_radius=spec.context_radius,
                retrain_interval=spec.retrain_interval,
                smoothing_alpha=spec.smoothing_alpha,
            )
            reps = []
            for r in range(spec.repetitions):
                if spec.records is not None:
                    stream = spec.records
                else:
                    stream = simulate_records(
                        dataclasses.replace(spec.config, seed=spec.config.seed + r)
                    )
                reps.append(
                    replay_metrics(stream, None, params, seed_frames=spec.seed_frames)
                )
            points.append(_mean_point(params, reps))
        except Exception as err:
            failures.append(SweepFailure(delta, c, v, f"{type(err).__name__}: {err}"))
    mask = pareto_mask([(p.reduction_factor, p.accuracy) for p in points])
    return SweepResult(tuple(points), mask, tuple(failures))


def _mean_point(params: PipelineParams, reps: list[TradeoffPoint]) -> TradeoffPoint:
    # identical repetitions must average to themselves exactly
    if all(p == reps[0] for p in reps[1:]):
        return reps[0]
    total = sum(p.total_frames for p in reps) / len(reps)
    manual = sum(p.manual_frames for p in reps) / len(reps)
    errors = {
        name: sum(p.errors_by_source[name] for p in reps) / len(reps)
        for name in reps[0].errors_by_source
    }
    return TradeoffPoint(
        params=params,
        total_frames=total,
        manual_frames=manual,
        auto_frames=total - manual,
        reduction_factor=total / manual if manual else float(total),
        accuracy=sum(p.accuracy for p in reps) / len(reps),
        no_manual=manual == 0,
        errors_by_source=errors,
    )
