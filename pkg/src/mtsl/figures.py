"""Run-report figures rendered straight to PNG files.

Figures are built on bare ``Figure`` objects with the Agg canvas, so no
global pyplot state or display backend is touched.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from mtsl.similarity import SimilarityMatrix

# PNG metadata is pinned so repeated renders are byte-identical.
_PNG_META = {"Software": "mtsl"}

PHASE_COLOURS = {"task": "white", "structural": "#f4d6a0", "fine-tune": "#cfe3f4"}


def _figure(ncols: int = 1, nrows: int = 1, width: float = 6.0, height: float = 3.2):
    fig = Figure(figsize=(width, height), layout="constrained")
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False)
    for ax in axes.flat:
        ax.tick_params(labelsize=8)
    return fig, axes


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    return path


def _shade_phases(ax, phases: Sequence[str]) -> None:
    """Colour contiguous runs of the same phase behind the curves."""
    start = 0
    for i in range(1, len(phases) + 1):
        if i == len(phases) or phases[i] != phases[start]:
            colour = PHASE_COLOURS.get(phases[start], "white")
            if colour != "white":
                ax.axvspan(start - 0.5, i - 0.5, color=colour, alpha=0.6, lw=0)
            start = i


def _epoch_records(records: Sequence[dict]) -> list[dict]:
    return [r for r in records if r.get("kind") == "epoch"]


def plot_losses(records: Sequence[dict], path) -> Path:
    """Per-task validation loss for every logged epoch, phases shaded."""
    epochs = _epoch_records(records)
    fig, axes = _figure()
    ax = axes[0, 0]
    _shade_phases(ax, [r["phase"] for r in epochs])
    x = np.arange(len(epochs))
    tasks = list(epochs[0]["val_loss"]) if epochs else []
    for t in tasks:
        ax.plot(x, [r["val_loss"][t] for r in epochs], lw=1.4, label=f"{t} (val)")
    amalg = [sum(r.get("amalgamation_loss", {}).values()) if "amalgamation_loss" in r else np.nan for r in epochs]
    if np.isfinite(amalg).any():
        ax.plot(x, amalg, "k.", ms=4, label="amalgamation")
    ax.set_yscale("log")
    ax.set_xlabel("logged epoch")
    ax.set_ylabel("loss")
    ax.set_title("Validation loss (orange: structural, blue: fine-tune)")
    if tasks:
        ax.legend(loc="upper right", frameon=False)
    return _save(fig, path)


def plot_cost(records: Sequence[dict], path) -> Path:
    """Parameter count and FLOPs per sample across logged epochs."""
    epochs = _epoch_records(records)
    fig, axes = _figure(ncols=2, width=7.0, height=2.8)
    x = np.arange(len(epochs))
    for ax, key, label in (
        (axes[0, 0], "parameter_count", "parameters"),
        (axes[0, 1], "flops_per_sample", "FLOPs / sample"),
    ):
        _shade_phases(ax, [r["phase"] for r in epochs])
        ax.step(x, [r[key] for r in epochs], where="mid", color="C3")
        ax.set_xlabel("logged epoch")
        ax.set_title(label)
    return _save(fig, path)


def plot_similarity(sim: SimilarityMatrix, path, title: str = "") -> Path:
    fig, axes = _figure(width=3.4, height=3.0)
    _heatmap(axes[0, 0], sim, title)
    return _save(fig, path)


def _heatmap(ax, sim: SimilarityMatrix, title: str) -> None:
    k = len(sim.tasks)
    ax.imshow(sim.S, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(k), sim.tasks)
    ax.set_yticks(range(k), sim.tasks)
    for i in range(k):
        for j in range(k):
            ax.text(j, i, f"{sim.S[i, j]:.2f}", ha="center", va="center", fontsize=7,
                    color="white" if sim.S[i, j] < 0.6 else "black")
    ax.set_title(title, fontsize=8)


def plot_groupings(records: Sequence[dict], path, limit: int = 12) -> Path | None:
    """One similarity heatmap per grouping decision logged by structural phases."""
    grouping = [r for r in records if r.get("kind") == "grouping"][:limit]
    if not grouping:
        return None
    ncols = min(4, len(grouping))
    nrows = int(np.ceil(len(grouping) / ncols))
    fig, axes = _figure(ncols=ncols, nrows=nrows, width=2.6 * ncols, height=2.5 * nrows)
    for ax in axes.flat:
        ax.set_axis_off()
    for ax, r in zip(axes.flat, grouping):
        ax.set_axis_on()
        sim = SimilarityMatrix(tuple(r["tasks"]), np.asarray(r["similarity"]))
        fused = " ".join("[" + ",".join(g) + "]" for g in r["fused"]) or "none"
        _heatmap(ax, sim, f"phase {r['structural_phase'] + 1}, depth {r['depth'] + 1}\nfuse {fused}")
    return _save(fig, path)


def render_run(records: Sequence[dict], out_dir) -> list[Path]:
    """All run figures into ``out_dir``; returns the files written."""
    out = Path(out_dir)
    paths = [plot_losses(records, out / "losses.png"), plot_cost(records, out / "cost.png")]
    g = plot_groupings(records, out / "similarity.png")
    if g is not None:
        paths.append(g)
    return paths
