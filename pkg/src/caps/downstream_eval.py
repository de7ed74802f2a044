"""Subset scoring: cross-validated random-forest performance with memoization."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import datasets as ds
from .diff_engine import ContractError, derive_seed
from .forest import ForestConfig, fit_forest, predict_forest, vote_counts


def subset_key(subset: Sequence[int]) -> str:
    return ",".join(str(j) for j in sorted(set(int(j) for j in subset)))


def canonical(subset: Sequence[int]) -> list[int]:
    return sorted(set(int(j) for j in subset))


def roc_auc(y_true, scores) -> float:
    """Area under the ROC curve via the rank statistic (average ranks for ties)."""
    from scipy.stats import rankdata

    y = np.asarray(y_true).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class EvalCache:
    scores: dict[str, float] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def get(self, key: str) -> float | None:
        with self._lock:
            v = self.scores.get(key)
            if v is None:
                self.misses += 1
            else:
                self.hits += 1
            return v

    def put(self, key: str, value: float) -> None:
        with self._lock:
            self.scores.setdefault(key, value)


class Evaluator:
    """Scores feature subsets of one dataset under a fixed fold plan.

    The forest for fold ``f`` is seeded with ``derive_seed(seed, "fold<f>")``
    regardless of the subset, so a subset's score is a pure function of the
    subset and the evaluator settings.  Scores land in ``[0, 1]``: 1-RAE is
    clipped here, the raw value is available from :meth:`fold_scores`.
    """

    def __init__(self, dataset: ds.Dataset, folds: ds.FoldPlan | None = None,
                 forest: ForestConfig | None = None, seed: int = 0, positive_class: int = 1):
        self.dataset = dataset
        self.seed = seed
        self.folds = folds or ds.kfold(dataset.n_samples, 5, derive_seed(seed, "folds"))
        self.forest = forest or ForestConfig()
        self.positive_class = positive_class
        self.metric = ds.headline_metric(dataset.task)
        self.cache = EvalCache()

    def _check(self, subset) -> list[int]:
        sub = canonical(subset)
        if not sub:
            raise ContractError("cannot evaluate an empty feature subset")
        if sub[0] < 0 or sub[-1] >= self.dataset.n_features:
            raise IndexError(f"subset ids must lie in [0, {self.dataset.n_features})")
        return sub

    def _forest_config(self, name: str) -> ForestConfig:
        return replace(self.forest, seed=derive_seed(self.seed + self.forest.seed, name))

    def _fit_predict(self, sub, train, test, name):
        d = self.dataset
        forest = fit_forest(d.X[np.ix_(train, sub)], d.y[train], d.task,
                            self._forest_config(name), n_classes=d.n_classes or None)
        Xt = d.X[np.ix_(test, sub)]
        return forest, Xt, predict_forest(forest, Xt)

    def fold_scores(self, subset) -> list[float]:
        """Raw headline metric on each held-out fold (uncached, unclipped)."""
        sub = self._check(subset)
        d = self.dataset
        out = []
        for f in range(self.folds.k):
            train, test = self.folds.split(f)
            _, _, pred = self._fit_predict(sub, train, test, f"fold{f}")
            out.append(ds.score(d.task, d.y[test], pred, self.positive_class))
        return out

    def evaluate(self, subset) -> float:
        """Mean fold score in ``[0, 1]``, memoized by canonical subset."""
        sub = self._check(subset)
        key = subset_key(sub)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        v = float(np.mean([min(1.0, max(0.0, s)) for s in self.fold_scores(sub)]))
        self.cache.put(key, v)
        return v

    __call__ = evaluate

    def fold_report(self, subset) -> list[dict[str, float]]:
        """Every reported metric per fold (AUC added for binary tasks)."""
        sub = self._check(subset)
        rows = []
        for f in range(self.folds.k):
            train, test = self.folds.split(f)
            rows.append(self._metrics(sub, train, test, f"fold{f}"))
        return rows

    def holdout_report(self, subset, test_fraction: float = 0.2) -> dict[str, float]:
        sub = self._check(subset)
        train, test = ds.holdout_split(self.dataset.n_samples, test_fraction, derive_seed(self.seed, "holdout"))
        return self._metrics(sub, train, test, "holdout")

    def _metrics(self, sub, train, test, name) -> dict[str, float]:
        d = self.dataset
        forest, Xt, pred = self._fit_predict(sub, train, test, name)
        m = ds.report_metrics(d.task, d.y[test], pred, self.positive_class)
        if d.task == "binary":
            votes = vote_counts(forest, Xt)
            m["roc_auc"] = roc_auc(d.y[test] == self.positive_class, votes[:, self.positive_class])
        return m


def evaluate_subset(dataset: ds.Dataset, subset, folds: ds.FoldPlan, evaluator: Evaluator | None = None) -> float:
    """Functional entry point; pass an ``evaluator`` to share its cache."""
    ev = evaluator or Evaluator(dataset, folds)
    return ev.evaluate(subset)
