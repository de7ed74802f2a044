"""Seeded synthetic datasets: the two bundled benchmarks and a planted-optimum set."""

from __future__ import annotations

import numpy as np

from .datasets import Dataset, from_arrays
from .diff_engine import seeded_rng


def smoke_dataset(seed: int = 7) -> Dataset:
    """300 x 20 binary task: 5 informative, 3 redundant and 12 noise columns."""
    rng = seeded_rng(seed)
    n = 300
    inf = rng.standard_normal((n, 5))
    z = inf[:, 0] + inf[:, 1] - inf[:, 2] + 0.8 * inf[:, 3] * inf[:, 4]
    y = (z > np.median(z)).astype(np.int64)
    red = np.column_stack([
        inf[:, 0] + 0.5 * rng.standard_normal(n),
        inf[:, 1] - inf[:, 2] + 0.5 * rng.standard_normal(n),
        inf[:, 3] + 0.5 * rng.standard_normal(n),
    ])
    noise = rng.standard_normal((n, 12))
    X = np.column_stack([inf, red, noise])
    perm = rng.permutation(X.shape[1])
    names = [f"inf{j}" for j in range(5)] + [f"red{j}" for j in range(3)] + [f"noise{j}" for j in range(12)]
    return from_arrays(X[:, perm], y, "binary", [names[j] for j in perm])


def medium_dataset(seed: int = 11) -> Dataset:
    """1000 x 40 three-class task: 6 informative, 4 redundant and 30 noise columns."""
    rng = seeded_rng(seed)
    n = 1000
    inf = rng.standard_normal((n, 6))
    w = rng.standard_normal((6, 3))
    y = np.argmax(inf @ w + 0.3 * rng.standard_normal((n, 3)), axis=1).astype(np.int64)
    red = inf[:, :4] @ rng.standard_normal((4, 4)) * 0.5 + 0.5 * rng.standard_normal((n, 4))
    noise = rng.standard_normal((n, 30))
    X = np.column_stack([inf, red, noise])
    perm = rng.permutation(X.shape[1])
    names = [f"inf{j}" for j in range(6)] + [f"red{j}" for j in range(4)] + [f"noise{j}" for j in range(30)]
    return from_arrays(X[:, perm], y, "multiclass", [names[j] for j in perm])


PLANTED = (1, 6, 10)


def planted_dataset(seed: int = 0, n: int = 200, n_features: int = 12) -> Dataset:
    """Binary task whose label is the majority vote of three binary columns.

    Columns ``PLANTED`` carry the bits; the rest are Gaussian noise.  A
    forest that sees all three bits can be exact; any other triple sees at
    most two and tops out near 75% accuracy.
    """
    rng = seeded_rng(seed)
    X = rng.standard_normal((n, n_features))
    bits = rng.integers(0, 2, size=(n, 3))
    for col, j in enumerate(PLANTED):
        X[:, j] = bits[:, col]
    y = (bits.sum(axis=1) >= 2).astype(np.int64)
    return from_arrays(X, y, "binary")
