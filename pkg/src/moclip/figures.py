"""Figure rendering for training runs and evaluation reports.

Everything renders straight to PNG files through the Agg backend; nothing
here ever opens a window, so it runs identically headless and in tests.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import ConfigurationError


def read_metrics_log(path: str | Path) -> list[dict]:
    """Parse the one-JSON-object-per-line training log."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigurationError(
                    f"metrics log {path} line {lineno} is not valid JSON: {exc}"
                ) from exc
    return records


def plot_training_curves(history: list[dict], path: str | Path) -> Path:
    """Loss (left axis) and validation macro AUC (right axis) per epoch.

    Accepts a full metrics log; per-step records are drawn as a faint loss
    trace behind the per-epoch means.
    """
    steps = [r for r in history if r.get("kind") == "step"]
    history = [r for r in history if r.get("kind", "epoch") == "epoch"]
    if not history and not steps:
        raise ConfigurationError("empty training history, nothing to plot")
    path = Path(path)
    epochs = [r["epoch"] for r in history]
    loss = [r["train_loss"] for r in history]

    fig, ax = plt.subplots(figsize=(7, 4.2))
    if steps:
        first = steps[0]["epoch"]
        per_epoch = max(sum(1 for r in steps if r["epoch"] == first), 1)
        xs = [r["epoch"] + (r["step"] - 1) % per_epoch / per_epoch for r in steps]
        ax.plot(xs, [r["loss_terms"]["total"] for r in steps],
                color="tab:blue", alpha=0.25, linewidth=0.6,
                label=None if history else "train loss (per step)")
    if history:
        ax.plot(epochs, loss, color="tab:blue", label="train loss")
    term_names = sorted({k for r in history for k in r.get("loss_terms", {})})
    for name in term_names:
        series = [r.get("loss_terms", {}).get(name) for r in history]
        if any(v not in (None, 0.0) for v in series):
            ax.plot(epochs, series, alpha=0.6, linewidth=1.0, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)

    if any("val_macro_auc" in r for r in history):
        ax2 = ax.twinx()
        auc = [r.get("val_macro_auc") for r in history]
        ax2.plot(epochs, auc, color="tab:red", marker="o", markersize=3,
                 label="val macro AUC")
        ax2.set_ylabel("val macro AUC")
        ax2.set_ylim(0.0, 1.02)
        lines, labels = ax.get_legend_handles_labels()
        lines2, labels2 = ax2.get_legend_handles_labels()
        ax.legend(lines + lines2, labels + labels2, fontsize=8, loc="center right")
    else:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_auc_bars(per_pathology: dict[str, float], path: str | Path,
                  title: str = "Zero-shot ROC-AUC") -> Path:
    if not per_pathology:
        raise ConfigurationError("no AUC values to plot")
    path = Path(path)
    names = list(per_pathology)
    values = [per_pathology[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(6, 0.55 * len(names)), 4.2))
    ax.bar(range(len(names)), values, color="tab:blue")
    ax.axhline(0.5, color="gray", linestyle="--", linewidth=1, label="chance")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.02)
    ax.set_ylabel("ROC-AUC")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_comparison_bars(tables: dict[str, dict[str, float]],
                         path: str | Path,
                         title: str = "Per-pathology ROC-AUC") -> Path:
    """Grouped bars, one group per pathology, one bar per variant."""
    if not tables:
        raise ConfigurationError("no variants to plot")
    path = Path(path)
    variants = list(tables)
    rows = list(tables[variants[0]])
    for v in variants[1:]:
        if set(tables[v]) != set(rows):
            raise ConfigurationError(f"variant {v!r} covers different pathologies")
    x = np.arange(len(rows))
    width = 0.8 / len(variants)
    fig, ax = plt.subplots(figsize=(max(7, 0.7 * len(rows)), 4.5))
    for i, v in enumerate(variants):
        offsets = x + (i - (len(variants) - 1) / 2) * width
        ax.bar(offsets, [tables[v][r] for r in rows], width, label=v)
    ax.axhline(0.5, color="gray", linestyle="--", linewidth=1)
    ax.set_xticks(x)
    ax.set_xticklabels(rows, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.02)
    ax.set_ylabel("ROC-AUC")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_roc_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]],
                    path: str | Path, title: str = "ROC curves") -> Path:
    if not curves:
        raise ConfigurationError("no ROC curves to plot")
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.2, 5))
    for name, (fpr, tpr) in curves.items():
        ax.plot(fpr, tpr, linewidth=1.2, label=name)
    ax.plot([0, 1], [0, 1], color="gray", linestyle="--", linewidth=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
