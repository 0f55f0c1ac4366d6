"""Figures written next to the text reports."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "dualpath",
}

LOSS_COMPONENTS = ("L_R", "L_Mcontent", "L_D", "L_Minter", "L_Fusion", "L_total")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.stem}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    try:
        # fixed metadata keeps the bytes reproducible across runs
        fig.savefig(tmp, metadata={"Software": None} if path.suffix == ".png" else None)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)
    return path


def plot_loss_curves(history: np.ndarray, path, title: str = "") -> Path:
    """Epoch-mean of every logged loss component."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = np.unique(history[:, 0])
        for j, name in enumerate(LOSS_COMPONENTS, start=2):
            col = history[:, j]
            if not np.any(col):
                continue
            means = [col[history[:, 0] == e].mean() for e in epochs]
            ax.plot(epochs, means, label=name, lw=2.0 if name == "L_total" else 1.0)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        if title:
            ax.set_title(title)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_recall(reports: dict, path, title: str = "") -> Path:
    """Recall@K curves, one line per labelled report."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, report in reports.items():
            ks = sorted(report.recall_at)
            ax.plot(ks, [report.recall_at[k] for k in ks], marker="o", label=label)
        ax.set_xlabel("K")
        ax.set_ylabel("Recall@K (%)")
        ax.set_ylim(0, 100)
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, path)
