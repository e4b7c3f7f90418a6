"""Figures written next to the JSON/JSONL outputs of ``train`` and ``evaluate``."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Mapping, Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

METRIC_LABELS = (
    ("length_control", "Length control"),
    ("melody_matching", "Melody matching"),
    ("bleu", "BLEU-2"),
)

_STABLE_METADATA = {
    "png": {"Software": None},
    "svg": {"Date": None},
    "pdf": {"CreationDate": None},
}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fmt = path.suffix[1:].lower() or "png"
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix="." + fmt)
    os.close(fd)
    try:
        # dropping timestamps keeps repeated renders byte-identical
        fig.savefig(tmp, format=fmt, metadata=_STABLE_METADATA.get(fmt))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def plot_training_curve(history: Sequence[Mapping], path, title: str | None = None) -> Path:
    """Per-epoch mean training loss (and validation loss when logged)."""
    fig = Figure(figsize=(6, 4), dpi=100)
    ax = fig.add_subplot(1, 1, 1)
    epochs = [h["epoch"] + 1 for h in history]
    ax.plot(epochs, [h["mean_loss"] for h in history], label="train", color="tab:blue")
    if any("val_loss" in h for h in history):
        pts = [(h["epoch"] + 1, h["val_loss"]) for h in history if "val_loss" in h]
        ax.plot(*zip(*pts), label="validation", color="tab:orange")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy per token")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_metric_comparison(reports: Mapping[str, object], path, title: str | None = None) -> Path:
    """Grouped bars of the three automatic metrics, one group per model."""
    fig = Figure(figsize=(7, 4), dpi=100)
    ax = fig.add_subplot(1, 1, 1)
    names = list(reports)
    width = 0.8 / max(len(names), 1)
    for i, name in enumerate(names):
        rep = reports[name]
        values = [100.0 * float(getattr(rep, key) if not isinstance(rep, Mapping) else rep[key])
                  for key, _ in METRIC_LABELS]
        xs = [k + (i - (len(names) - 1) / 2) * width for k in range(len(METRIC_LABELS))]
        bars = ax.bar(xs, values, width=width, label=name)
        for bar, v in zip(bars, values):
            ax.annotate(f"{v:.1f}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                        ha="center", va="bottom", fontsize=8)
    ax.set_xticks(range(len(METRIC_LABELS)))
    ax.set_xticklabels([label for _, label in METRIC_LABELS])
    ax.set_ylabel("%")
    ax.set_ylim(0, 110)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
