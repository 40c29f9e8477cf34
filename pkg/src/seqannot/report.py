"""Figure rendering for sweep and replay results."""

from __future__ import annotations

from pathlib import Path

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evaluation import SweepResult, TradeoffPoint


def tradeoff_figure(result: SweepResult, path: str | Path) -> None:
    """Accuracy against reduction factor, frontier points joined and labeled."""
    if not result.points:
        raise ValueError("nothing to plot: the sweep produced no points")
    fig = Figure(figsize=(7.2, 4.8))
    ax = fig.add_subplot()
    reductions = [p.reduction_factor for p in result.points]
    ax.scatter(
        reductions,
        [p.accuracy for p in result.points],
        s=26,
        color="#9aa0a6",
        label="grid points",
        zorder=2,
    )
    frontier = sorted(
        (p.reduction_factor, p.accuracy, p.params.delta_min)
        for p, keep in zip(result.points, result.pareto)
        if keep
    )
    ax.plot(
        [f[0] for f in frontier],
        [f[1] for f in frontier],
        marker="o",
        color="#c5221f",
        label="frontier",
        zorder=3,
    )
    for reduction, accuracy, delta in frontier:
        ax.annotate(
            f"$\\delta$={delta:g}",
            (reduction, accuracy),
            textcoords="offset points",
            xytext=(6, 6),
            fontsize=8,
        )
    if max(reductions) / max(min(reductions), 1e-12) > 20:
        ax.set_xscale("log")
    ax.set_xlabel("reduction factor (in-segment frames per manual label)")
    ax.set_ylabel("accuracy")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    fig.tight_layout()
    FigureCanvasAgg(fig).print_figure(str(path), dpi=150)


def run_figure(point: TradeoffPoint, path: str | Path) -> None:
    """Label volume and error attribution for one replayed operating point."""
    fig = Figure(figsize=(8.0, 4.0))
    left, right = fig.subplots(1, 2)
    left.bar(
        ["manual", "auto"],
        [point.manual_frames, point.auto_frames],
        color=["#1a73e8", "#9aa0a6"],
    )
    left.set_ylabel("frames")
    left.set_title("labels by origin")
    sources = sorted(point.errors_by_source)
    right.bar(
        sources,
        [point.errors_by_source[s] for s in sources],
        color="#c5221f",
    )
    right.set_ylabel("mislabeled frames")
    right.set_title("errors by source")
    right.tick_params(axis="x", labelrotation=20)
    fig.suptitle(
        f"reduction {point.reduction_factor:.2f}, accuracy {point.accuracy:.4f}"
        + (" (no manual labels)" if point.no_manual else "")
    )
    fig.tight_layout()
    FigureCanvasAgg(fig).print_figure(str(path), dpi=150)
