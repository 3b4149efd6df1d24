"""Figure rendering for run reports.

Figures are built on bare ``Figure`` objects with the Agg canvas, so nothing
touches pyplot's global state and no display is needed.
"""

from __future__ import annotations

import functools
from pathlib import Path

import matplotlib as mpl
import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .adapter import ExpertGroupTable

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _styled(fn):
    """Run a figure builder under the module style; rc values are read as
    artists are created, so the whole builder sits inside the context."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with mpl.rc_context(STYLE):
            return fn(*args, **kwargs)
    return wrapper


def _figure(width: float, height: float) -> Figure:
    fig = Figure(figsize=(width, height), layout="constrained")
    FigureCanvasAgg(fig)
    return fig


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    return path


@_styled
def expert_weight_figure(records, groups: ExpertGroupTable, path, step: int | None = None) -> Path:
    """Per-layer grouped bars: router mass of each expert group (and the
    empty expert) on each preference's held-out data."""
    records = list(records)
    step = max(r.step for r in records) if step is None else step
    records = [r for r in records if r.step == step]
    layers = sorted({r.layer for r in records})
    prefs = sorted({r.preference for r in records})
    labels = [e.name or f"group {e.preference}" for e in groups.entries] + ["empty"]
    ncol = min(len(layers), 4)
    nrow = -(-len(layers) // ncol)
    fig = _figure(3.0 * ncol, 2.4 * nrow + 0.3)
    axes = np.atleast_1d(fig.subplots(nrow, ncol, sharey=True, squeeze=False)).ravel()
    width = 0.8 / len(labels)
    x = np.arange(len(prefs))
    for ax, layer in zip(axes, layers):
        by_pref = {r.preference: r for r in records if r.layer == layer}
        for j, label in enumerate(labels):
            if j < len(groups.entries):
                vals = [by_pref[p].group_masses(groups)[groups.entries[j].preference] for p in prefs]
            else:
                vals = [by_pref[p].empty_mass for p in prefs]
            ax.bar(x + (j - (len(labels) - 1) / 2) * width, vals, width, label=label,
                   color="0.6" if label == "empty" else None)
        ax.set_title(f"layer {layer}")
        ax.set_xticks(x, [f"pref {p}" for p in prefs])
        ax.set_ylim(0, 1)
    for ax in axes[len(layers):]:
        ax.set_visible(False)
    axes[0].set_ylabel("router mass")
    axes[0].legend(fontsize=7)
    fig.suptitle(f"expert-group mass by preference (step {step})")
    fig.supxlabel("group mass = sum over the group's experts of the token-mean router weight",
                  fontsize=7, color="0.35")
    return _save(fig, path)


@_styled
def training_figure(loss_rows, eval_rows, path) -> Path:
    """Loss components per step, plus held-out accuracy and specialization."""
    fig = _figure(8.0, 3.0)
    ax1, ax2 = fig.subplots(1, 2)
    if loss_rows:
        steps = [r["step"] for r in loss_rows]
        for key in ("preference_loss", "routing_loss", "total"):
            ax1.plot(steps, [r[key] for r in loss_rows], label=key.replace("_", " "), lw=1)
    ax1.set_xlabel("step")
    ax1.set_title("training loss")
    ax1.legend()
    if eval_rows:
        prefs = sorted({r["preference"] for r in eval_rows})
        for p in prefs:
            rows = [r for r in eval_rows if r["preference"] == p]
            ax2.plot([r["step"] for r in rows], [r["accuracy"] for r in rows], marker="o", lw=1,
                     label=f"acc pref {p}")
        first = [r for r in eval_rows if r["preference"] == prefs[0]]
        ax2.plot([r["step"] for r in first], [r["specialization_score"] for r in first], "k--", marker="s",
                 lw=1, label="specialization")
    ax2.set_ylim(-0.05, 1.05)
    ax2.set_xlabel("step")
    ax2.set_title("held-out evaluation")
    ax2.legend(fontsize=7)
    return _save(fig, path)


@_styled
def bench_figure(results, path) -> Path:
    """Median time per call for each path, one bar cluster per (shape, phase)."""
    results = list(results)
    paths = [p for p in ("sequential", "parallel", "linear", "egs_loss") if any(r.path == p for r in results)]
    keys = list(dict.fromkeys((r.phase, r.K, r.r, r.batch * r.seq) for r in results if r.path != "egs_loss"))
    table = {(r.path, r.phase, r.K, r.r, r.batch * r.seq): r.seconds for r in results}
    fig = _figure(max(4.0, 1.3 * len(keys) + 2), 3.2)
    ax = fig.subplots()
    x = np.arange(len(keys))
    width = 0.8 / max(len(paths), 1)
    for j, p in enumerate(paths):
        vals = [table.get((p,) + k, np.nan) for k in keys]
        ax.bar(x + (j - (len(paths) - 1) / 2) * width, np.array(vals) * 1e3, width, label=p)
    short = {"forward": "fwd", "forward_backward": "fwd+bwd"}
    ax.set_xticks(x, [f"{short.get(ph, ph)} K={K} r={r}\nN={n}" for ph, K, r, n in keys], fontsize=7)
    ax.set_yscale("log")
    ax.set_ylabel("median ms / call")
    ax.legend(fontsize=7)
    ax.set_title("adapter forward cost")
    return _save(fig, path)
