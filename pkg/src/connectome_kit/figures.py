"""File-rendered figures for the report path.

Every function takes already-computed tables and writes a PNG next to
the delimited outputs; nothing here ever shows a window (Agg backend).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_effects_figure",
    "save_curve_figure",
    "save_comparison_figure",
    "save_pvalue_figure",
]

_LEVEL_COLOR = "#4878b0"


def save_effects_figure(effects, path, title="Impact of pipeline options"):
    """Horizontal bars of per-level accuracy effects with 95% CIs."""
    factors = []
    for e in effects:
        if e.factor not in factors:
            factors.append(e.factor)
    labels, values, err_lo, err_hi, seps = [], [], [], [], []
    for factor in factors:
        for e in effects:
            if e.factor == factor:
                labels.append(f"{factor}={e.level}")
                values.append(100.0 * e.coefficient)
                err_lo.append(100.0 * (e.coefficient - e.ci_low))
                err_hi.append(100.0 * (e.ci_high - e.coefficient))
        seps.append(len(labels) - 0.5)

    fig, ax = plt.subplots(figsize=(7, 0.45 * len(labels) + 1.5))
    y = np.arange(len(labels))
    ax.barh(y, values, xerr=[err_lo, err_hi], color=_LEVEL_COLOR, capsize=3)
    for s in seps[:-1]:
        ax.axhline(s, color="0.8", lw=0.8)
    ax.axvline(0.0, color="0.3", lw=1.0)
    ax.set_yticks(y)
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("accuracy effect relative to mean (points)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_curve_figure(curve_summary, path, title="Learning curve"):
    """Mean accuracy vs training fraction with a standard-error band."""
    fractions = [row["fraction"] for row in curve_summary]
    means = np.array([100.0 * row["mean_accuracy"] for row in curve_summary])
    errs = np.array([100.0 * row["stderr"] for row in curve_summary])

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(fractions, means, "o-", color=_LEVEL_COLOR)
    ax.fill_between(fractions, means - errs, means + errs,
                    color=_LEVEL_COLOR, alpha=0.25, lw=0)
    ax.set_xlabel("fraction of training set used")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_comparison_figure(level_scores, path, title="Score distributions"):
    """Box plots of accuracy per option level, one panel per factor."""
    factors = sorted(level_scores)
    fig, axes = plt.subplots(1, len(factors), figsize=(3.2 * len(factors), 4),
                             squeeze=False)
    for ax, factor in zip(axes[0], factors):
        levels = sorted(level_scores[factor])
        data = [100.0 * np.asarray(level_scores[factor][lvl]) for lvl in levels]
        ax.boxplot(data)
        ax.set_xticks(np.arange(1, len(levels) + 1))
        ax.set_xticklabels(levels)
        ax.set_title(factor, fontsize=10)
        ax.tick_params(axis="x", labelrotation=30, labelsize=8)
        ax.set_ylabel("accuracy (%)")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_pvalue_figure(edges, path, title="Edge significance"):
    """-log10 permutation p-value per connectivity edge."""
    p = np.array([e["p_value"] for e in edges])
    order = np.argsort(p)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.stem(np.arange(len(p)), -np.log10(p[order]))
    ax.axhline(-np.log10(0.05), color="crimson", lw=1.0, ls="--",
               label="p = 0.05")
    ax.set_xlabel("edges (sorted)")
    ax.set_ylabel("-log10 p")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
