"""CART trees and random forests (Gini / variance reduction), compiled with numba.

Trees are stored as flat arrays.  Split search visits features in a
per-tree random order drawn from a splitmix64 stream, stops after
``max_features`` non-constant features, and keeps the split with the lowest
weighted impurity; ties go to the lower feature index, then the lower
threshold.  Thresholds are midpoints between consecutive distinct values and
rows with ``x <= threshold`` go left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .diff_engine import ContractError, DimensionError, seeded_rng



@numba.njit(cache=True)
def _splitmix_next(state):
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True)
def _best_split(X, yc, yr, idx, lo, hi, is_clf, n_classes, order, max_features, min_leaf):
    m = hi - lo
    best_score = np.inf
    best_f = -1
    best_thr = 0.0
    visited = 0
    rows = idx[lo:hi]
    for oi in range(order.shape[0]):
        if visited >= max_features:
            break
        f = order[oi]
        x = X[rows, f]
        srt = np.argsort(x, kind="mergesort")
        xs = x[srt]
        if xs[0] == xs[m - 1]:
            continue
        visited += 1
        if is_clf:
            left = np.zeros(n_classes)
            right = np.zeros(n_classes)
            for i in range(m):
                right[yc[rows[i]]] += 1.0
            for i in range(1, m):
                c = yc[rows[srt[i - 1]]]
                left[c] += 1.0
                right[c] -= 1.0
                if i < min_leaf or m - i < min_leaf or xs[i - 1] == xs[i]:
                    continue
                sl = 0.0
                sr = 0.0
                for k in range(n_classes):
                    sl += left[k] * left[k]
                    sr += right[k] * right[k]
                score = (i - sl / i) + ((m - i) - sr / (m - i))
                thr = 0.5 * (xs[i - 1] + xs[i])
                if score < best_score or (score == best_score and (f < best_f or (f == best_f and thr < best_thr))):
                    best_score = score
                    best_f = f
                    best_thr = thr
        else:
            tot = 0.0
            totsq = 0.0
            for i in range(m):
                v = yr[rows[i]]
                tot += v
                totsq += v * v
            s = 0.0
            sq = 0.0
            for i in range(1, m):
                v = yr[rows[srt[i - 1]]]
                s += v
                sq += v * v
                if i < min_leaf or m - i < min_leaf or xs[i - 1] == xs[i]:
                    continue
                sr = tot - s
                sqr = totsq - sq
                score = (sq - s * s / i) + (sqr - sr * sr / (m - i))
                thr = 0.5 * (xs[i - 1] + xs[i])
                if score < best_score or (score == best_score and (f < best_f or (f == best_f and thr < best_thr))):
                    best_score = score
                    best_f = f
                    best_thr = thr
    return best_f, best_thr


@numba.njit(cache=True)
def _build_tree(X, yc, yr, sample, is_clf, n_classes, max_features, min_leaf, max_depth, seed):
    n = sample.shape[0]
    p = X.shape[1]
    n_out = n_classes if is_clf else 1
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros((cap, n_out))
    idx = sample.copy()
    state = np.zeros(1, dtype=np.uint64)
    state[0] = seed
    order = np.arange(p)

    # stack of (node, lo, hi, depth)
    stack = np.zeros((cap, 4), dtype=np.int64)
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = n
    stack[0, 3] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = stack[top, 0]
        lo = stack[top, 1]
        hi = stack[top, 2]
        depth = stack[top, 3]
        m = hi - lo
        pure = True
        if is_clf:
            first = yc[idx[lo]]
            for i in range(lo, hi):
                value[node, yc[idx[i]]] += 1.0
                if yc[idx[i]] != first:
                    pure = False
        else:
            first_r = yr[idx[lo]]
            acc = 0.0
            for i in range(lo, hi):
                acc += yr[idx[i]]
                if yr[idx[i]] != first_r:
                    pure = False
            value[node, 0] = acc / m
        if pure or m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        for i in range(p - 1, 0, -1):
            j = np.int64(_splitmix_next(state) % np.uint64(i + 1))
            tmp = order[i]
            order[i] = order[j]
            order[j] = tmp
        f, thr = _best_split(X, yc, yr, idx, lo, hi, is_clf, n_classes, order, max_features, min_leaf)
        if f < 0:
            continue
        # stable partition of idx[lo:hi] around thr
        buf = idx[lo:hi].copy()
        a = lo
        for i in range(m):
            if X[buf[i], f] <= thr:
                idx[a] = buf[i]
                a += 1
        b = a
        for i in range(m):
            if X[buf[i], f] > thr:
                idx[b] = buf[i]
                b += 1
        feature[node] = f
        threshold[node] = thr
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # push right first so the left subtree is expanded first
        stack[top, 0] = rnode
        stack[top, 1] = a
        stack[top, 2] = hi
        stack[top, 3] = depth + 1
        top += 1
        stack[top, 0] = lnode
        stack[top, 1] = lo
        stack[top, 2] = a
        stack[top, 3] = depth + 1
        top += 1
    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy())


@numba.njit(cache=True)
def _apply_tree(X, feature, threshold, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for r in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[r, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[r] = node
    return out


@dataclass
class ForestConfig:
    n_trees: int = 20
    max_features: int | None = None
    min_samples_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ContractError("n_trees must be >= 1")


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_values(self, X: np.ndarray) -> np.ndarray:
        leaves = _apply_tree(np.ascontiguousarray(X, dtype=np.float64), self.feature, self.threshold, self.left, self.right)
        return self.value[leaves]


@dataclass
class Forest:
    task: str
    n_features: int
    n_classes: int
    trees: list[Tree] = field(default_factory=list)


def _is_classification(task: str) -> bool:
    return task in ("binary", "multiclass")


def fit_tree(X, y, task: str, *, max_features: int | None = None, min_samples_leaf: int = 1,
             max_depth: int | None = None, seed: int = 0, sample: np.ndarray | None = None,
             n_classes: int | None = None) -> Tree:
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, p = X.shape
    clf = _is_classification(task)
    if clf:
        yc = np.asarray(y, dtype=np.int64)
        yr = np.zeros(1)
        n_classes = n_classes or int(yc.max()) + 1
    else:
        yc = np.zeros(1, dtype=np.int64)
        yr = np.asarray(y, dtype=np.float64)
        n_classes = 1
    mf = p if max_features is None else max_features
    if not 1 <= mf <= p:
        raise ContractError(f"max_features={mf} must lie in [1, {p}]")
    sample = np.arange(n, dtype=np.int64) if sample is None else np.asarray(sample, dtype=np.int64)
    arrays = _build_tree(
        X, yc, yr, sample, clf, n_classes, mf, min_samples_leaf,
        -1 if max_depth is None else max_depth, np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
    )
    return Tree(*arrays)


def fit_forest(X, y, task: str, config: ForestConfig, n_classes: int | None = None) -> Forest:
    """Bagged CART forest; each tree gets its own bootstrap draw and split stream."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    n, p = X.shape
    if _is_classification(task):
        y = np.asarray(y, dtype=np.int64)
        if len(np.unique(y)) < 2:
            raise ContractError("classification target has a single class")
        n_classes = n_classes or int(y.max()) + 1
    else:
        n_classes = 0
    mf = config.max_features or max(1, math.ceil(math.sqrt(p)))
    mf = min(mf, p)
    rng = seeded_rng(config.seed)
    forest = Forest(task, p, n_classes)
    for _ in range(config.n_trees):
        tree_seed = int(rng.integers(0, 2**63))
        sample = rng.integers(0, n, size=n) if config.bootstrap else None
        forest.trees.append(fit_tree(
            X, y, task, max_features=mf, min_samples_leaf=config.min_samples_leaf,
            max_depth=config.max_depth, seed=tree_seed, sample=sample, n_classes=n_classes or None,
        ))
    return forest


def vote_counts(forest: Forest, X) -> np.ndarray:
    """Per-row count of trees voting for each class (classification only)."""
    X = np.asarray(X, dtype=np.float64)
    votes = np.zeros((X.shape[0], forest.n_classes))
    rows = np.arange(X.shape[0])
    for tree in forest.trees:
        # argmax takes the first maximum, i.e. the lowest class id
        votes[rows, np.argmax(tree.leaf_values(X), axis=1)] += 1
    return votes


def predict_forest(forest: Forest, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise DimensionError(f"forest was fit on {forest.n_features} columns, got {X.shape}")
    if _is_classification(forest.task):
        return np.argmax(vote_counts(forest, X), axis=1).astype(np.int64)
    return np.mean([t.leaf_values(X)[:, 0] for t in forest.trees], axis=0)
