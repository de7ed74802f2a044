"""Feature-selection record collection, augmentation and search-seed selection.

The collector is a lightweight multi-agent explorer: one agent per feature
keeps a running value estimate ``q[j]`` of the score obtained when it is
selected.  Each episode every agent independently opts in with probability
``eps * 0.5 + (1 - eps) * sigmoid(q[j])`` where
``eps(t) = max(0.05, 0.5 * 0.995**t)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .diff_engine import ContractError, seeded_rng
from .set_codec import make_target

log = logging.getLogger(__name__)

RECORDS_FORMAT_VERSION = 1
ORIGINS = ("explored", "seeded-baseline")
MAX_EMPTY_RETRIES = 10


@dataclass(frozen=True)
class SelectionRecord:
    subset: tuple[int, ...]
    v: float
    episode: int
    origin: str = "explored"

    def __post_init__(self):
        if not self.subset:
            raise ContractError("a selection record needs a non-empty subset")
        if self.origin not in ORIGINS:
            raise ContractError(f"unknown origin {self.origin!r}")


@dataclass
class AgentBank:
    n_features: int
    q: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.q = np.zeros(self.n_features)
        self.counts = np.zeros(self.n_features, dtype=np.int64)

    @staticmethod
    def epsilon(t: int) -> float:
        return max(0.05, 0.5 * 0.995 ** t)

    def select_probs(self, t: int) -> np.ndarray:
        eps = self.epsilon(t)
        return eps * 0.5 + (1.0 - eps) / (1.0 + np.exp(-self.q))

    def update(self, subset: Sequence[int], v: float) -> None:
        for j in subset:
            self.counts[j] += 1
            self.q[j] += (v - self.q[j]) / self.counts[j]


def collect_records(n_features: int, evaluate: Callable[[Sequence[int]], float], epochs: int = 300,
                    seed: int = 0, bank: AgentBank | None = None) -> list[SelectionRecord]:
    """Run the explorer for ``epochs`` episodes and return every scored subset.

    The all-features subset is recorded first as the seeded baseline.
    """
    if n_features < 2:
        raise ContractError("need at least 2 features to select among")
    if epochs < 1:
        raise ContractError("epochs must be >= 1")
    rng = seeded_rng(seed)
    bank = bank or AgentBank(n_features)
    everything = tuple(range(n_features))
    records = [SelectionRecord(everything, evaluate(everything), -1, "seeded-baseline")]
    for t in range(epochs):
        probs = bank.select_probs(t)
        for _ in range(MAX_EMPTY_RETRIES):
            chosen = np.flatnonzero(rng.random(n_features) < probs)
            if chosen.size:
                break
        else:
            # argmax picks the lowest id among equal estimates
            chosen = np.array([int(np.argmax(bank.q))])
        subset = tuple(int(j) for j in chosen)
        v = evaluate(subset)
        bank.update(subset, v)
        records.append(SelectionRecord(subset, v, t))
        if t % 50 == 0:
            log.debug("episode %d |f|=%d v=%.4f", t, len(subset), v)
    return records


def augment_records(records: Sequence[SelectionRecord], copies: int = 25, max_len: int | None = None,
                    seed: int = 0, n_features: int | None = None) -> list[tuple[tuple[int, ...], list[int]]]:
    """Pair ``copies`` random orderings of each subset with its canonical target.

    Records longer than ``max_len`` are skipped.  Orderings come from
    Fisher-Yates shuffles (``Generator.permutation``).
    """
    if n_features is None:
        n_features = 1 + max(max(r.subset) for r in records) if records else 0
    if max_len is None:
        max_len = n_features
    rng = seeded_rng(seed)
    corpus = []
    dropped = 0
    for r in records:
        if len(r.subset) > max_len:
            dropped += 1
            continue
        target = make_target(r.subset, max_len, n_features)
        ids = np.array(r.subset, dtype=np.int64)
        for _ in range(copies):
            corpus.append((tuple(int(j) for j in rng.permutation(ids)), target))
    if dropped:
        log.warning("dropped %d record(s) longer than max_len=%d", dropped, max_len)
    return corpus


def top_k_seeds(records: Sequence[SelectionRecord], k: int = 25) -> list[tuple[int, ...]]:
    """Best distinct subsets by score; ties prefer smaller, then lexicographically smaller."""
    if not records:
        raise ContractError("no records to choose seeds from")
    best: dict[tuple[int, ...], float] = {}
    for r in records:
        key = tuple(sorted(r.subset))
        if key not in best or r.v > best[key]:
            best[key] = r.v
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], len(kv[0]), kv[0]))
    return [s for s, _ in ranked[:k]]


def save_records(path, records: Sequence[SelectionRecord]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "subset": sorted(r.subset), "v": r.v, "episode": r.episode,
                "origin": r.origin, "format_version": RECORDS_FORMAT_VERSION,
            }) + "\n")


class RecordsFormatError(ValueError):
    pass


def load_records(path) -> list[SelectionRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                subset = [int(j) for j in obj["subset"]]
                v = float(obj["v"])
                if any(b <= a for a, b in zip(subset, subset[1:])):
                    raise ValueError("subset ids are not strictly ascending")
                if not (0.0 <= v <= 1.0) or math.isnan(v):
                    raise ValueError(f"v={v} outside [0, 1]")
                version = obj.get("format_version", RECORDS_FORMAT_VERSION)
                if version != RECORDS_FORMAT_VERSION:
                    raise ValueError(f"unsupported format_version {version!r}")
                out.append(SelectionRecord(tuple(subset), v, int(obj["episode"]), obj["origin"]))
            except (ValueError, KeyError, TypeError, ContractError) as exc:
                raise RecordsFormatError(f"{path}:{lineno}: {exc}") from exc
    return out
