"""Continual-learning metrics over lower-triangular accuracy matrices.

``R[k][t]`` is the accuracy on task ``t``'s test set after learning task
``k`` (0-based here), defined only for ``t <= k``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeError

MODES = ("class_il_overall", "class_il_balanced", "task_il_balanced")


class AccuracyMatrix:
    """T x T accuracies; undefined (upper) entries are NaN and masked."""

    def __init__(self, rows, mode: str = "class_il_overall"):
        if isinstance(rows, AccuracyMatrix):
            rows = rows.values
        if isinstance(rows, np.ndarray) and rows.ndim == 2:
            values = np.array(rows, dtype=np.float64)
            T = values.shape[0]
            if values.shape != (T, T):
                raise ShapeError(f"accuracy matrix must be square, got {values.shape}")
        else:
            rows = [list(r) for r in rows]
            T = len(rows)
            values = np.full((T, T), np.nan)
            for k, r in enumerate(rows):
                if len(r) < k + 1:
                    raise ShapeError(f"row {k} has {len(r)} entries, needs {k + 1}")
                values[k, :k + 1] = r[:k + 1]
        self.values = values
        self.mode = mode
        self.defined = np.tril(np.ones((T, T), dtype=bool))
        self.values[~self.defined] = np.nan
        lower = self.values[self.defined]
        if np.any(np.isnan(lower)):
            raise ShapeError("accuracy matrix has undefined entries on or below the diagonal")
        if np.any((lower < 0) | (lower > 1)):
            raise ConfigError("accuracies must lie in [0, 1]")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, idx):
        k, t = idx
        if t > k:
            raise IndexError(f"entry ({k}, {t}) undefined: task {t} not yet seen after task {k}")
        return float(self.values[k, t])

    def rows(self) -> list[list[float]]:
        return [[float(x) for x in self.values[k, :k + 1]] for k in range(self.T)]


def _as_matrix(R) -> AccuracyMatrix:
    return R if isinstance(R, AccuracyMatrix) else AccuracyMatrix(R)


def _labels(y_true, y_pred):
    yt = np.asarray(y_true, dtype=np.int64).ravel()
    yp = np.asarray(y_pred, dtype=np.int64).ravel()
    if yt.size != yp.size:
        raise ShapeError(f"y_true has {yt.size} labels, y_pred {yp.size}")
    if yt.size == 0:
        raise ConfigError("empty label vectors")
    return yt, yp


def balanced_accuracy(y_true, y_pred, n_classes: int) -> float:
    """Mean per-class recall over classes that occur in ``y_true``.

    Predictions outside ``[0, n_classes)`` simply count as wrong.
    """
    yt, yp = _labels(y_true, y_pred)
    if np.any((yt < 0) | (yt >= n_classes)):
        raise ConfigError(f"true labels must lie in [0, {n_classes})")
    recalls = []
    for c in range(n_classes):
        sel = yt == c
        if sel.any():
            recalls.append(np.count_nonzero(yp[sel] == c) / np.count_nonzero(sel))
    if not recalls:
        raise ConfigError("no class present in y_true")
    return float(np.mean(recalls))


def overall_accuracy(y_true, y_pred) -> float:
    yt, yp = _labels(y_true, y_pred)
    return np.count_nonzero(yt == yp) / yt.size


def forgetting(R) -> float:
    """Mean drop of each earlier task from its peak to its final accuracy."""
    R = _as_matrix(R)
    T = R.T
    if T < 2:
        raise ConfigError("forgetting needs at least 2 tasks")
    v = R.values
    drops = [np.max(v[t:, t]) - v[T - 1, t] for t in range(T - 1)]
    return float(np.mean(drops))


def backward_transfer(R) -> float:
    """Mean change of earlier tasks between when they were learned and the end."""
    R = _as_matrix(R)
    T = R.T
    if T < 2:
        raise ConfigError("backward transfer needs at least 2 tasks")
    v = R.values
    return float(np.mean([v[T - 1, t] - v[t, t] for t in range(T - 1)]))


def mean_acc(R, mode: str = "final", test_sizes=None) -> float:
    """Mean accuracy across tasks.

    ``final``: average of the last row. ``running``: after each task, the
    accuracy on the union of seen test sets (weighted by ``test_sizes``),
    averaged over all steps.
    """
    R = _as_matrix(R)
    v = R.values
    T = R.T
    if mode == "final":
        return float(np.mean(v[T - 1, :]))
    if mode == "running":
        n = np.ones(T) if test_sizes is None else np.asarray(test_sizes, dtype=np.float64)
        if n.shape != (T,):
            raise ShapeError(f"need {T} test sizes, got {n.shape}")
        steps = [float(np.dot(v[k, :k + 1], n[:k + 1]) / n[:k + 1].sum()) for k in range(T)]
        return float(np.mean(steps))
    raise ConfigError(f"unknown mean_acc mode {mode!r}")


@dataclass
class MetricReport:
    bacc: float
    masked_bacc: float
    mean_acc: float
    fgt: float
    bwt: float

    def to_dict(self) -> dict:
        return asdict(self)


def final_weighted(R, weights) -> float:
    """Weighted mean of the last row (weights: class counts per task)."""
    R = _as_matrix(R)
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(R.values[R.T - 1, :], w) / w.sum())


def metric_report(matrices: dict, class_counts, test_sizes=None, mean_mode: str = "final") -> MetricReport:
    """The five headline numbers from the three accuracy matrices.

    Final bACC weights each task's balanced accuracy by its class count,
    which equals the balanced accuracy over all classes pooled. With a
    single task FGT and BWT are reported as 0.
    """
    overall = _as_matrix(matrices["class_il_overall"])
    single = overall.T < 2
    return MetricReport(
        bacc=final_weighted(matrices["class_il_balanced"], class_counts),
        masked_bacc=final_weighted(matrices["task_il_balanced"], class_counts),
        mean_acc=mean_acc(overall, mean_mode, test_sizes),
        fgt=0.0 if single else forgetting(overall),
        bwt=0.0 if single else backward_transfer(overall),
    )
