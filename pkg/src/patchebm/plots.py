"""Static matplotlib figures written next to the CSV/JSON reports.

Positive contributions are drawn in orange (supporting the positive class),
negative ones in blue, matching the sign convention of the importance
reports.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalstats import EvalReport, ScoredSet

POSITIVE_COLOR = "#e66101"
NEGATIVE_COLOR = "#0571b0"


def _roc_points(scored: ScoredSet) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-scored.scores, kind="stable")
    labels = scored.labels[order]
    tps = np.cumsum(labels)
    fps = np.cumsum(1 - labels)
    tpr = np.concatenate([[0.0], tps / max(labels.sum(), 1)])
    fpr = np.concatenate([[0.0], fps / max((1 - labels).sum(), 1)])
    return fpr, tpr


def save_roc_curve(scored: ScoredSet, path: str | Path, title: str = "ROC") -> Path:
    fpr, tpr = _roc_points(scored)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(fpr, tpr, color=POSITIVE_COLOR, lw=2)
    ax.plot([0, 1], [0, 1], color="grey", lw=1, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def save_auc_comparison(report: EvalReport, path: str | Path) -> Path:
    names = [r.name for r in report.results]
    aucs = np.array([r.auc for r in report.results])
    err_low = aucs - np.array([r.ci_low for r in report.results])
    err_high = np.array([r.ci_high for r in report.results]) - aucs
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(names), 4))
    x = np.arange(len(names))
    ax.bar(x, aucs, yerr=[np.maximum(err_low, 0), np.maximum(err_high, 0)],
           capsize=4, color=POSITIVE_COLOR, alpha=0.85)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("AUC")
    ax.set_ylim(0, 1.05)
    ax.set_title(f"AUC with 95% bootstrap CI ({report.task})")
    for xi, a in zip(x, aucs):
        ax.text(xi, min(a + 0.02, 1.02), f"{a:.3f}", ha="center", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def save_group_importance(
    names: Sequence[str],
    point: np.ndarray,
    ci_low: np.ndarray,
    ci_high: np.ndarray,
    path: str | Path,
    title: str = "Group-level feature importance",
) -> Path:
    """Horizontal bars, largest importance on top, with CI error bars."""
    point = np.asarray(point)
    order = np.argsort(point)  # ascending, so the largest lands on top
    y = np.arange(order.size)
    err = np.vstack([
        np.maximum(point[order] - np.asarray(ci_low)[order], 0),
        np.maximum(np.asarray(ci_high)[order] - point[order], 0),
    ])
    fig, ax = plt.subplots(figsize=(6, 1.0 + 0.4 * order.size))
    ax.barh(y, point[order], xerr=err, capsize=3, color=POSITIVE_COLOR, alpha=0.85)
    ax.set_yticks(y)
    ax.set_yticklabels([names[i] for i in order])
    ax.set_xlabel("mean |contribution| (logit)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def save_individual_importance(
    names: Sequence[str],
    contributions: np.ndarray,
    predicted_label: int,
    probability: float,
    reference_label: int | None,
    path: str | Path,
    subject_id: str = "",
) -> Path:
    """Signed per-feature contributions for one subject."""
    contributions = np.asarray(contributions)
    order = np.argsort(np.abs(contributions))
    y = np.arange(order.size)
    colors = [POSITIVE_COLOR if contributions[i] >= 0 else NEGATIVE_COLOR for i in order]
    fig, ax = plt.subplots(figsize=(6, 1.2 + 0.4 * order.size))
    ax.barh(y, contributions[order], color=colors)
    ax.axvline(0.0, color="black", lw=0.8)
    ax.set_yticks(y)
    ax.set_yticklabels([names[i] for i in order])
    ax.set_xlabel("contribution to logit")
    ref = "n/a" if reference_label is None else str(reference_label)
    ax.set_title(
        f"{subject_id}: predicted {predicted_label} (p={probability:.3f}), reference {ref}"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)
