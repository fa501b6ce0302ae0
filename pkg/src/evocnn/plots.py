"""Matplotlib figure rendering for run reports.

Figures land next to the delimited outputs they illustrate: the fitness
curve beside history.csv, the confusion matrix beside report.csv. Uses the
Agg backend so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evalstats import ContingencyTable, DiagnosticStats, format_value  # noqa: E402


def save_fitness_curve(history, path) -> None:
    """Best and mean accuracy per generation."""
    gens = [row.generation for row in history]
    best = [row.best_fitness * 100.0 for row in history]
    mean = [row.mean_fitness * 100.0 for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(gens, mean, marker="o", label="Average")
    ax.plot(gens, best, marker="s", label="Best")
    ax.set_xlabel("Generation")
    ax.set_ylabel("Accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(loc="lower right")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def save_confusion_matrix(table: ContingencyTable, stats: DiagnosticStats, path) -> None:
    """2x2 count matrix with the headline ratios in the title."""
    counts = [[table.tp, table.fn], [table.fp, table.tn]]
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(counts, cmap="Blues")
    for i in range(2):
        for j in range(2):
            ax.text(j, i, str(counts[i][j]), ha="center", va="center",
                    color="black", fontsize=14)
    ax.set_xticks([0, 1], ["Predicted +", "Predicted -"])
    ax.set_yticks([0, 1], ["Confirmed +", "Confirmed -"])
    acc = format_value("accuracy", stats.accuracy)
    ppv = format_value("positive_predictive_value", stats.positive_predictive_value)
    npv = format_value("negative_predictive_value", stats.negative_predictive_value)
    ax.set_title(f"Accuracy {acc}  PPV {ppv}  NPV {npv}")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
