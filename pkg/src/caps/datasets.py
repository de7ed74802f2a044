"""Tabular dataset loading, fold plans, metrics and the one-hot subset state."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .diff_engine import ContractError, seeded_rng

log = logging.getLogger(__name__)

TASKS = ("binary", "multiclass", "regression")
MIN_ROWS = 10


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]
    task: str
    class_labels: tuple[str, ...] = ()

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_labels) if self.task != "regression" else 0


def _is_int_like(s: str) -> bool:
    try:
        v = float(s)
    except ValueError:
        return False
    return np.isfinite(v) and v == int(v)


def load_csv(path, label_column: str, task: str | None = None) -> Dataset:
    """Read a UTF-8, comma separated file with a header row.

    Lines starting with ``#`` are comments.  Rows with a missing or
    non-numeric feature cell are dropped with a warning.  The task is
    regression when some label is a non-integer real, binary for two
    distinct labels and multiclass otherwise; class labels map to ids in
    first-appearance order.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    if task is not None and task not in TASKS:
        raise DatasetError(f"unknown task {task!r}; expected one of {TASKS}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(line for line in fh if not line.lstrip().startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path} is empty") from None
        if label_column not in header:
            raise DatasetError(f"label column {label_column!r} not in header of {path}")
        li = header.index(label_column)
        feature_names = tuple(h for i, h in enumerate(header) if i != li)
        rows, labels, dropped = [], [], 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                dropped += 1
                continue
            label = row[li].strip()
            try:
                vals = [float(c) for i, c in enumerate(row) if i != li]
            except ValueError:
                dropped += 1
                continue
            if label == "" or not all(np.isfinite(vals)):
                dropped += 1
                continue
            rows.append(vals)
            labels.append(label)
    if dropped:
        log.warning("dropped %d row(s) with missing or unparseable cells from %s", dropped, path)
    if len(rows) < MIN_ROWS:
        raise DatasetError(f"{path}: only {len(rows)} usable rows, need at least {MIN_ROWS}")
    if len(feature_names) < 2:
        raise DatasetError(f"{path}: need at least 2 feature columns")

    if task is None:
        numeric = all(_is_float(lab) for lab in labels)
        if numeric and not all(_is_int_like(lab) for lab in labels):
            task = "regression"
        else:
            task = "binary" if len(set(labels)) == 2 else "multiclass"
    if task == "regression":
        try:
            y = np.array([float(lab) for lab in labels])
        except ValueError:
            raise DatasetError("regression task needs numeric labels") from None
        classes: tuple[str, ...] = ()
    else:
        classes = tuple(dict.fromkeys(labels))
        index = {c: i for i, c in enumerate(classes)}
        y = np.array([index[lab] for lab in labels], dtype=np.int64)
    return Dataset(np.array(rows, dtype=np.float64), y, feature_names, task, classes)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def from_arrays(X, y, task: str, feature_names: Sequence[str] | None = None) -> Dataset:
    X = np.asarray(X, dtype=np.float64)
    if feature_names is None:
        feature_names = [f"f{j}" for j in range(X.shape[1])]
    if task == "regression":
        return Dataset(X, np.asarray(y, dtype=np.float64), tuple(feature_names), task)
    y = np.asarray(y, dtype=np.int64)
    n_classes = int(y.max()) + 1
    return Dataset(X, y, tuple(feature_names), task, tuple(str(c) for c in range(n_classes)))


def write_csv(path, dataset: Dataset, label_column: str = "label") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(dataset.feature_names) + [label_column])
        for row, lab in zip(dataset.X, dataset.y):
            if dataset.task == "regression":
                lab_s = repr(float(lab))
            else:
                lab_s = dataset.class_labels[int(lab)]
            w.writerow([repr(float(v)) for v in row] + [lab_s])


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: np.ndarray
    seed: int

    def split(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train indices, test indices) for one fold."""
        test = self.assignment == fold
        return np.flatnonzero(~test), np.flatnonzero(test)

    def sizes(self) -> list[int]:
        return [int(np.sum(self.assignment == f)) for f in range(self.k)]


def kfold(n: int, k: int = 5, seed: int = 0) -> FoldPlan:
    """Seeded shuffle, then deal positions round-robin into ``k`` folds."""
    if k < 2:
        raise ContractError("k must be at least 2")
    if n < k:
        raise ContractError(f"cannot split {n} rows into {k} folds")
    order = seeded_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % k
    return FoldPlan(k, assignment, seed)


def holdout_split(n: int, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    order = seeded_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


# ---------------------------------------------------------------------------
# subset state


def one_hot_rep(subset: Sequence[int], n_features: int) -> np.ndarray:
    v = np.zeros(n_features)
    for j in subset:
        if not 0 <= j < n_features:
            raise IndexError(f"feature id {j} out of range [0, {n_features})")
        v[j] = 1.0
    return v


def from_one_hot(vec) -> list[int]:
    return [int(j) for j in np.flatnonzero(np.asarray(vec) > 0.5)]


# ---------------------------------------------------------------------------
# metrics


def _check_lengths(a, b):
    if len(a) != len(b):
        raise ContractError(f"length mismatch: {len(a)} vs {len(b)}")


def f1_binary(y_true, y_pred, positive_class: int = 1) -> tuple[float, float, float]:
    """Return ``(f1, precision, recall)``; zero denominators give 0."""
    _check_lengths(y_true, y_pred)
    t = np.asarray(y_true) == positive_class
    p = np.asarray(y_pred) == positive_class
    tp = int(np.sum(t & p))
    fp = int(np.sum(~t & p))
    fn = int(np.sum(t & ~p))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


def micro_f1(y_true, y_pred, n_classes: int | None = None) -> float:
    """Global TP / (TP + (FP + FN) / 2); equals accuracy for single-label data."""
    _check_lengths(y_true, y_pred)
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if n_classes is not None and (t.size and (t.max() >= n_classes or p.max() >= n_classes)):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    tp = int(np.sum(t == p))
    wrong = len(t) - tp
    # each wrong prediction is one FP (predicted class) and one FN (true class)
    return tp / (tp + 0.5 * (wrong + wrong)) if len(t) else 0.0


def one_minus_rae(y_true, y_pred) -> float:
    """1 - sum|y - yhat| / sum|y - mean(y)|; unclipped, may be negative."""
    _check_lengths(y_true, y_pred)
    t = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    denom = np.abs(t - t.mean()).sum()
    if denom == 0:
        raise ContractError("1-RAE is undefined for a constant target")
    return float(1.0 - np.abs(t - p).sum() / denom)


def one_minus_mae(y_true, y_pred) -> float:
    return float(1.0 - np.mean(np.abs(np.asarray(y_true) - np.asarray(y_pred))))


def one_minus_mse(y_true, y_pred) -> float:
    return float(1.0 - np.mean((np.asarray(y_true) - np.asarray(y_pred)) ** 2))


def one_minus_rmse(y_true, y_pred) -> float:
    return float(1.0 - np.sqrt(np.mean((np.asarray(y_true) - np.asarray(y_pred)) ** 2)))


def headline_metric(task: str) -> str:
    return {"binary": "f1", "multiclass": "micro_f1", "regression": "1-rae"}[task]


def score(task: str, y_true, y_pred, positive_class: int = 1) -> float:
    """The headline metric for ``task`` (F1, micro-F1 or raw 1-RAE)."""
    if task == "binary":
        return f1_binary(y_true, y_pred, positive_class)[0]
    if task == "multiclass":
        return micro_f1(y_true, y_pred)
    return one_minus_rae(y_true, y_pred)


def report_metrics(task: str, y_true, y_pred, positive_class: int = 1) -> dict[str, float]:
    """All metrics reported for a task; only the headline one gates anything."""
    if task == "binary":
        f1, prec, rec = f1_binary(y_true, y_pred, positive_class)
        return {"f1": f1, "precision": prec, "recall": rec}
    if task == "multiclass":
        return {"micro_f1": micro_f1(y_true, y_pred)}
    return {
        "1-rae": one_minus_rae(y_true, y_pred),
        "1-mae": one_minus_mae(y_true, y_pred),
        "1-mse": one_minus_mse(y_true, y_pred),
        "1-rmse": one_minus_rmse(y_true, y_pred),
    }
