"""Figure rendering for training runs and retrieval evaluations.

Everything draws through the Agg backend so runs on headless boxes never
touch a display. Each function writes PNG files next to the delimited
logs and returns the paths it produced; callers decide what to mention
on stdout.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .train import TrainLog  # noqa: E402

__all__ = [
    "render_training_figures",
    "render_recall_figure",
    "render_heatmap_figure",
]

_DPI = 110


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def render_training_figures(log: TrainLog, out_dir: str | Path) -> list[Path]:
    """Loss/lr curves plus per-epoch accuracy and recall, when present."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if log.steps:
        steps = [s.step for s in log.steps]
        fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
        ax_loss.plot(steps, [s.loss for s in log.steps], lw=1.0, color="tab:blue")
        ax_loss.set_ylabel("loss")
        ax_loss.grid(alpha=0.3)
        ax_lr.plot(steps, [s.lr for s in log.steps], lw=1.0, color="tab:orange")
        ax_lr.set_ylabel("learning rate")
        ax_lr.set_xlabel("step")
        ax_lr.grid(alpha=0.3)
        written.append(_save(fig, out_dir / "loss_curve.png"))

    task_names = sorted({t for e in log.epochs for t in e.task_top1})
    if task_names:
        fig, ax = plt.subplots(figsize=(7, 4))
        for task in task_names:
            xs = [e.epoch for e in log.epochs if e.task_top1.get(task) is not None]
            ys = [e.task_top1[task] for e in log.epochs if e.task_top1.get(task) is not None]
            if xs:
                ax.plot(xs, ys, marker="o", ms=3, label=task)
        ax.set_xlabel("epoch")
        ax.set_ylabel("train top-1")
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        written.append(_save(fig, out_dir / "accuracy.png"))

    series: dict[tuple[str, int], list[tuple[int, float]]] = {}
    for e in log.epochs:
        for rec in e.retrieval:
            series.setdefault((rec["dataset"], rec["K"]), []).append((e.epoch, rec["recall"]))
    if series:
        fig, ax = plt.subplots(figsize=(7, 4))
        for (name, k), points in sorted(series.items()):
            xs, ys = zip(*points)
            ax.plot(xs, ys, marker="o", ms=3, label=f"{name} @ {k}")
        ax.set_xlabel("epoch")
        ax.set_ylabel("recall")
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        written.append(_save(fig, out_dir / "recall_curve.png"))

    return written


def render_recall_figure(reports, path: str | Path) -> Path:
    """Grouped bar chart of recall@K for a one-shot evaluation."""
    path = Path(path)
    datasets = sorted({r.dataset for r in reports})
    ks = sorted({r.k for r in reports})
    values = {(r.dataset, r.k): r.recall for r in reports}
    x = np.arange(len(datasets), dtype=np.float64)
    width = 0.8 / max(len(ks), 1)

    fig, ax = plt.subplots(figsize=(1.8 * len(datasets) + 3, 4))
    for i, k in enumerate(ks):
        ys = [values.get((d, k), 0.0) for d in datasets]
        ax.bar(x + i * width, ys, width=width, label=f"K={k}")
    ax.set_xticks(x + width * (len(ks) - 1) / 2)
    ax.set_xticklabels(datasets, rotation=15, ha="right", fontsize=8)
    ax.set_ylabel("recall")
    ax.set_ylim(0.0, 1.05)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def render_heatmap_figure(bundle, path: str | Path) -> Path:
    """One panel per head of pooled attention, on a shared color scale."""
    path = Path(path)
    heads = bundle.per_head.shape[0]
    cols = min(heads, 4)
    rows = (heads + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for h in range(rows * cols):
        ax = axes[h // cols][h % cols]
        if h < heads:
            ax.imshow(bundle.per_head[h], cmap="magma", vmin=0.0, vmax=1.0)
            ax.set_title(f"head {h}", fontsize=8)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)
