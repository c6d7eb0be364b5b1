"""Figures written next to the CLI's JSON/CSV reports."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import AGE_GROUPS, ClassDistribution, to_uint8  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}

GROUP_COLORS = ("#4c72b0", "#55a868", "#dd8452", "#c44e52")


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_class_distributions(dists: Mapping[str, ClassDistribution], path) -> Path:
    """Grouped bars of age-group proportions, one bar set per named distribution."""
    names = list(dists)
    labels = [g.label for g in AGE_GROUPS]
    width = 0.8 / max(len(names), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        x = np.arange(len(labels))
        for i, name in enumerate(names):
            probs = dists[name].probabilities
            ax.bar(x + (i - (len(names) - 1) / 2) * width, probs, width, label=name)
        ax.axhline(1 / len(labels), color="0.5", lw=0.8, ls="--")
        ax.set_xticks(x, labels)
        ax.set_xlabel("age group")
        ax.set_ylabel("proportion")
        ax.set_ylim(0, 1)
        if len(names) > 1:
            ax.legend()
        return _save(fig, path)


def plot_loss_curves(rows: Sequence[Mapping[str, float]], path, smooth: int = 25) -> Path:
    """Generator terms on the left, discriminator terms on the right, moving-averaged."""
    steps = np.array([r["step"] for r in rows])

    def series(key):
        v = np.array([r[key] for r in rows], dtype=float)
        if smooth > 1 and v.size >= smooth:
            v = np.convolve(v, np.ones(smooth) / smooth, mode="valid")
            return steps[smooth - 1:], v
        return steps, v

    with plt.rc_context(STYLE):
        fig, (ax_g, ax_d) = plt.subplots(1, 2, figsize=(8, 3))
        for key in ("fm", "rec", "id", "total_G"):
            ax_g.plot(*series(key), label=key, lw=1)
        for key in ("adv", "gp", "total_D"):
            ax_d.plot(*series(key), label=key, lw=1)
        ax_g.set_title("generator")
        ax_d.set_title("discriminator")
        for ax in (ax_g, ax_d):
            ax.set_xlabel("step")
            ax.legend()
        return _save(fig, path)


def plot_age_accuracy(report, path) -> Path:
    """Estimated mean age +- std per target group against the reference means."""
    groups = list(report.per_target_group)
    acc = [report.per_target_group[k] for k in groups]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        x = np.arange(len(groups))
        ax.errorbar(x, [a.mean_pred_age for a in acc], yerr=[a.std_pred_age for a in acc],
                    fmt="o", capsize=3, label="estimated")
        ax.scatter(x, [a.gt_mean for a in acc], marker="_", s=300, color="k", label="reference")
        ax.set_xticks(x, [AGE_GROUPS[k].label for k in groups])
        ax.set_xlabel("target age group")
        ax.set_ylabel("age (years)")
        ax.legend()
        return _save(fig, path)


def plot_translation_grid(rows: Sequence[Sequence[np.ndarray]], path, titles: Sequence[str] | None = None) -> Path:
    """Image grid; each row is a sequence of H x W x C images in [-1, 1]."""
    n_rows, n_cols = len(rows), max(len(r) for r in rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.3 * n_cols, 1.3 * n_rows), squeeze=False)
        for i, row in enumerate(rows):
            for j in range(n_cols):
                ax = axes[i][j]
                ax.axis("off")
                if j < len(row):
                    ax.imshow(to_uint8(row[j]))
                if i == 0 and titles and j < len(titles):
                    ax.set_title(titles[j])
        return _save(fig, path)
