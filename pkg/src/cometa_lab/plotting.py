"""Figure helpers for reports. Always renders off-screen."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "cometa-lab",
}

# fixed colours so a method looks the same in every figure
METHOD_COLORS = {
    "random": "#7f7f7f",
    "global_average": "#8c564b",
    "attribute_only": "#9467bd",
    "cometa": "#d62728",
    "cometa_no_beg": "#1f77b4",
    "cometa_no_seg": "#2ca02c",
}


def figsize(width: float = 6.0, ratio: float | None = None) -> tuple[float, float]:
    ratio = ratio or (math.sqrt(5) - 1.0) / 2.0
    return width, width * ratio


def save(fig, path) -> Path:
    """PNG without the software/date metadata, so reruns are byte-identical."""
    path = Path(path)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def phase_figure(means: Mapping[str, Mapping[str, Mapping[str, float]]], phases: Sequence[str], path):
    with plt.rc_context(STYLE):
        fig, (ax_auc, ax_ll) = plt.subplots(1, 2, figsize=figsize(8.0, 0.4))
        x = range(len(phases))
        for method, per_phase in means.items():
            shown = [p for p in phases if p in per_phase]
            xs = [phases.index(p) for p in shown]
            color = METHOD_COLORS.get(method)
            ax_auc.plot(xs, [per_phase[p]["auc"] for p in shown], marker="o", ms=3, label=method, color=color)
            ax_ll.plot(xs, [per_phase[p]["logloss"] for p in shown], marker="o", ms=3, label=method, color=color)
        for ax, name in ((ax_auc, "test AUC"), (ax_ll, "test Logloss")):
            ax.set_xticks(list(x))
            ax.set_xticklabels(phases)
            ax.set_ylabel(name)
        ax_auc.legend(frameon=False)
        fig.tight_layout()
        return save(fig, path)


def loss_curve_figure(curves: Mapping[str, Sequence[Mapping[str, float]]], path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(5.0))
        for variant, rows in curves.items():
            ep = [r["epoch"] for r in rows]
            ax.plot(ep, [r["loss_b"] for r in rows], label=f"{variant} loss_b")
            ax.plot(ep, [r["loss_seg"] for r in rows], ls="--", label=f"{variant} loss_seg")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean episode loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        return save(fig, path)
