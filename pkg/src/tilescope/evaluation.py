"""Confusion matrices, per-class precision/recall/F1 and cross-run aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classes import NUM_CLASSES
from .errors import ShapeError


def confusion(true_labels, predicted_labels, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Tally an n x n matrix with rows = true class, columns = predicted."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    predicted_labels = np.asarray(predicted_labels, dtype=np.int64)
    if true_labels.shape != predicted_labels.shape:
        raise ShapeError(
            f"label lists differ in length: {true_labels.shape} vs {predicted_labels.shape}"
        )
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (true_labels, predicted_labels), 1)
    return matrix


def precision_recall_f1(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class precision, recall and F1; zero denominators yield 0."""
    matrix = np.asarray(matrix, dtype=np.float64)
    diag = np.diag(matrix)
    col = matrix.sum(axis=0)
    row = matrix.sum(axis=1)
    precision = np.divide(diag, col, out=np.zeros_like(diag, dtype=np.float64), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros_like(diag, dtype=np.float64), where=row > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(pr), where=pr > 0)
    return precision, recall, f1


def f1_scores(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class F1 plus the unweighted macro mean."""
    _, _, f1 = precision_recall_f1(matrix)
    return f1, float(f1.mean())


@dataclass
class MetricsReport:
    """Per-run per-class metrics plus the pooled aggregates.

    ``f1_std`` is the population standard deviation over the pooled
    per-class-per-run F1 values; ``macro_std_across_runs`` is the
    alternative reading (std of the per-run macro means) and is reported
    alongside, not as the headline.
    """

    precision: np.ndarray  # (runs, classes)
    recall: np.ndarray
    f1: np.ndarray
    macro_f1_mean: float
    f1_std: float
    macro_std_across_runs: float
    run_count: int

    @property
    def per_run_macro(self) -> np.ndarray:
        return self.f1.mean(axis=1)


def report_from_confusion(matrix: np.ndarray) -> MetricsReport:
    """Single-run report; the pool is that run's per-class F1 values."""
    return aggregate_runs([matrix])


def aggregate_runs(matrices: list[np.ndarray]) -> MetricsReport:
    """Pool the per-class F1 of every run; mean and population std of the pool."""
    if not matrices:
        raise ShapeError("aggregate_runs needs at least one run")
    precisions, recalls, f1s = [], [], []
    for m in matrices:
        p, r, f = precision_recall_f1(m)
        precisions.append(p)
        recalls.append(r)
        f1s.append(f)
    f1 = np.stack(f1s)
    pool = f1.ravel()
    return MetricsReport(
        precision=np.stack(precisions),
        recall=np.stack(recalls),
        f1=f1,
        macro_f1_mean=float(pool.mean()),
        f1_std=float(pool.std(ddof=0)),
        macro_std_across_runs=float(f1.mean(axis=1).std(ddof=0)),
        run_count=len(matrices),
    )


def write_metrics_csv(report: MetricsReport, path: str | Path) -> None:
    """One row per (run, class) plus the `macro,<mean>,<std>` summary row."""
    lines = ["run,class,precision,recall,f1"]
    for run in range(report.run_count):
        for cls in range(report.f1.shape[1]):
            lines.append(
                f"{run},{cls},{report.precision[run, cls]:.6f},"
                f"{report.recall[run, cls]:.6f},{report.f1[run, cls]:.6f}"
            )
    lines.append(f"macro,{report.macro_f1_mean:.6f},{report.f1_std:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
