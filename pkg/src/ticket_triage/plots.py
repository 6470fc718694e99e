"""PNG figures for evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def confusion_figure(metrics, title: str, path) -> None:
    cm = np.asarray(metrics.confusion)
    n = len(metrics.labels)
    size = max(4.0, 0.35 * n + 2.5)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(n), metrics.labels, rotation=90, fontsize=7)
    ax.set_yticks(range(n), metrics.labels, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("gold")
    ax.set_title(title)
    if n <= 12:
        for i in range(n):
            for j in range(n):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if cm[i, j] > cm.max() / 2 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def f1_bar_figure(report, path) -> None:
    from .evaluation import PAPER_REFERENCE_F1, TASKS

    x = np.arange(len(TASKS))
    measured = [report.metrics[t].macro_f1 for t in TASKS]
    reference = [PAPER_REFERENCE_F1[t] for t in TASKS]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, measured, 0.4, label="measured macro-F1")
    ax.bar(x + 0.2, reference, 0.4, label="reference (not reproducible)", alpha=0.5)
    ax.set_xticks(x, TASKS)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report_figures(report, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths = []
    for task, m in report.metrics.items():
        p = out / f"confusion_{task}.png"
        confusion_figure(m, task, p)
        paths.append(p)
    p = out / "f1_by_task.png"
    f1_bar_figure(report, p)
    paths.append(p)
    return paths
