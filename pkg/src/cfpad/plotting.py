"""Figures written next to the text reports (ROC curves, training curves, ablations).

Figures are built on bare ``Figure`` objects with the Agg canvas, so nothing
touches pyplot's global state and commands can run headless.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "font.size": 9,
    "axes.linewidth": 0.8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "legend.fontsize": 8,
    "legend.frameon": False,
}

COLORS = {
    "baseline": "#7f7f7f",
    "cgmixstyle": "#1f77b4",
    "ci": "#ff7f0e",
    "cf-pad": "#2ca02c",
}


def method_color(name: str) -> str | None:
    low = name.lower()
    for key in ("cf-pad", "cgmixstyle", "ci", "baseline"):
        if key in low:
            return COLORS[key]
    return None


def _figure(width: float = 4.0, height: float | None = None, ncols: int = 1):
    import matplotlib as mpl

    golden = (np.sqrt(5.0) - 1.0) / 2.0
    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(width, height or width * golden))
        FigureCanvasAgg(fig)
        axes = fig.subplots(1, ncols)
    return fig, axes


def _save(fig: Figure, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no Software/date metadata so reruns produce identical files
    fig.savefig(path, dpi=120, metadata={"Software": None})
    return path


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(APCER, 1 - BPCER) as fractions, one point per distinct threshold, from (1,1) to (0,0)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    bona, attack = scores[labels == 1], scores[labels == 0]
    apcer = np.array([(attack >= t).mean() for t in thresholds])
    tpr = np.array([(bona >= t).mean() for t in thresholds])
    return apcer, tpr


def plot_roc(scores, labels, path: str | Path, title: str = "", auc_value: float | None = None) -> Path:
    fpr, tpr = roc_points(scores, labels)
    fig, ax = _figure(3.2, 3.0)
    label = f"AUC = {100 * auc_value:.2f}%" if auc_value is not None else None
    ax.plot(fpr, tpr, color=COLORS["cf-pad"], drawstyle="steps-post", label=label)
    ax.plot([0, 1], [0, 1], color="0.8", linestyle="--", linewidth=0.8)
    ax.set_xlabel("APCER")
    ax.set_ylabel("1 - BPCER")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    if title:
        ax.set_title(title)
    if label:
        ax.legend(loc="lower right")
    return _save(fig, path)


def plot_training_history(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Loss components and evaluation HTER/AUC per epoch (rows as from ``read_history``)."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax_loss, ax_metric) = _figure(7.0, 2.6, ncols=2)
    ax_loss.plot(epochs, [r["ce"] for r in rows], label="CE")
    ax_loss.plot(epochs, [r["effect_ce"] for r in rows], label="effect CE")
    ax_loss.plot(epochs, [r["total"] for r in rows], label="total", color="k")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_metric.plot(epochs, [r["hter"] for r in rows], color=COLORS["ci"], label="HTER (%)")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylabel("HTER (%)")
    twin = ax_metric.twinx()
    twin.plot(epochs, [100 * r["auc"] for r in rows], color=COLORS["cgmixstyle"], label="AUC (%)")
    twin.set_ylabel("AUC (%)")
    return _save(fig, path)


def plot_ablation(table: Mapping[str, Mapping[str, tuple[float, float]]], path: str | Path) -> Path:
    """Grouped bars of HTER and AUC per method, one group per protocol.

    ``table[method][protocol] = (hter, auc_percent)``.
    """
    methods = list(table)
    protocols = list(next(iter(table.values())))
    x = np.arange(len(protocols))
    width = 0.8 / max(len(methods), 1)
    fig, (ax_h, ax_a) = _figure(7.0, 2.8, ncols=2)
    for i, m in enumerate(methods):
        color = method_color(m)
        ax_h.bar(x + i * width, [table[m][p][0] for p in protocols], width, label=m, color=color)
        ax_a.bar(x + i * width, [table[m][p][1] for p in protocols], width, label=m, color=color)
    for ax, name in ((ax_h, "HTER (%)"), (ax_a, "AUC (%)")):
        ax.set_xticks(x + width * (len(methods) - 1) / 2)
        ax.set_xticklabels(protocols, fontsize=7)
        ax.set_ylabel(name)
    ax_a.set_ylim(max(0.0, min(table[m][p][1] for m in methods for p in protocols) - 5), 100.5)
    ax_h.legend()
    return _save(fig, path)
