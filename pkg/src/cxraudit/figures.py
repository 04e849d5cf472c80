"""PNG figures written next to the report. Rendering uses the Agg backend."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fairness import FEATURES, feature_groups  # noqa: E402

# no timestamp or version in the PNG, so reruns are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> str:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path.name


def workload_figure(workload: dict, out_dir: Path) -> str:
    rads = list(workload)
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(rads) + 2), 3.5))
    finding = [workload[r].finding for r in rads]
    clear = [workload[r].no_finding for r in rads]
    ax.bar(rads, finding, label="finding", color="#c0504d")
    ax.bar(rads, clear, bottom=finding, label="no finding", color="#9bbb59")
    ax.set_ylabel("images")
    ax.set_title("Images per annotator")
    ax.legend()
    ax.tick_params(axis="x", rotation=90)
    fig.tight_layout()
    return _save(fig, out_dir / "workload.png")


def age_density_figure(density, out_dir: Path) -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for curve, color in ((density.finding, "#c0504d"), (density.no_finding, "#4f81bd")):
        ax.plot(curve.ages, curve.density, color=color, label=f"{curve.group} (n={curve.n})")
    ax.set_xlabel("age (years)")
    ax.set_ylabel("density")
    ax.set_title("Age by illness")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_dir / "age_density.png")


def heatmap_figure(heatmaps: list, out_dir: Path) -> str:
    n = len(heatmaps)
    cols = min(4, n) or 1
    rows = max(1, math.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.6 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, h in zip(axes.flat, heatmaps):
        ax.imshow(h.grid, cmap="hot", interpolation="nearest")
        ax.set_title(f"{h.label.name} ({h.n_boxes})", fontsize=8)
    fig.tight_layout()
    return _save(fig, out_dir / "heatmaps.png")


def pr_figure(report, out_dir: Path) -> str:
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, r in report.per_class.items():
        if r.n_gt and r.recall:
            ax.step([0.0, *map(float, r.recall)], [1.0, *map(float, r.precision)],
                    where="post", label=f"{label.name} ({r.ap:.2f})")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"Precision-recall at IoU >= {report.iou_threshold}")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, out_dir / "pr_curves.png")


def parity_figure(report, metric: str, out_dir: Path) -> str:
    labels = sorted(report.cells)
    fig, axes = plt.subplots(1, len(FEATURES), figsize=(10, 0.3 * len(labels) + 1.5), squeeze=False)
    for ax, feature in zip(axes.flat, FEATURES):
        groups = feature_groups(feature)
        width = 0.8 / len(groups)
        for k, g in enumerate(groups):
            values = []
            for label in labels:
                cell = report.cells[label][feature].get(g)
                value = cell.metric(metric) if cell else None
                values.append(float(value) if value is not None else 0.0)
            ax.barh([i + k * width for i in range(len(labels))], values, height=width, label=g)
        ax.set_yticks([i + 0.4 - width / 2 for i in range(len(labels))])
        ax.set_yticklabels([l.name for l in labels], fontsize=6)
        ax.set_xlim(0, 1)
        ax.set_title(f"{metric} by {feature}")
        ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(fig, out_dir / f"parity_{metric}.png")
