"""End-to-end run: collect -> augment -> train codec -> seed -> search -> report.

Every stage persists its output in the run directory so stages can be re-run
on their own from the CLI.  All randomness flows from one global seed; a
component's seed is ``derive_seed(global_seed, component_name)``.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import collector as col
from . import datasets as ds
from . import figures
from . import policy_search as ps
from . import set_codec as sc
from .diff_engine import derive_seed, seeded_rng
from .downstream_eval import Evaluator
from .forest import ForestConfig

log = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
EMBEDDINGS_FORMAT_VERSION = 1

RECORDS_FILE = "records.jsonl"
CHECKPOINT_FILE = "codec.json"
SEARCH_LOG_FILE = "search_log.jsonl"
REPORT_FILE = "report.json"
EMBEDDINGS_FILE = "embeddings.csv"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class CollectorSettings:
    epochs: int = 300


@dataclass
class CodecSettings:
    d: int = 128
    heads: int = 4
    n_inducing: int = 32
    max_len: int | None = None
    rff_hidden: int | None = None
    lr: float = 0.001
    batch_size: int = 64
    epochs: int = 200
    target_accuracy: float | None = None
    check_every: int = 5
    warmup_steps: int = 500


@dataclass
class SearchSettings:
    lam: float = 0.1
    gamma: float = 0.99
    clip_eps: float = 0.2
    lr_actor: float = 0.0003
    lr_critic: float = 0.001
    steps_per_seed: int = 1000
    ppo_batch: int = 512
    ppo_epochs: int = 10
    horizon: int = 50
    action_scale: float = 0.05
    init_log_std: float = -1.0
    hidden: int = 128


@dataclass
class ForestSettings:
    n_trees: int = 20
    max_features: int | None = None
    min_samples_leaf: int = 1
    max_depth: int | None = None


@dataclass
class RunConfig:
    dataset: str
    label_column: str = "label"
    task: str | None = None
    seed: int = 0
    out_dir: str = "caps_run"
    folds: int = 5
    augment_copies: int = 25
    n_seeds: int = 25
    random_baseline_count: int = 50
    export_subsets: int = 5
    export_copies: int = 20
    positive_class: int = 1
    figures: bool = True
    collector: CollectorSettings = field(default_factory=CollectorSettings)
    codec: CodecSettings = field(default_factory=CodecSettings)
    search: SearchSettings = field(default_factory=SearchSettings)
    forest: ForestSettings = field(default_factory=ForestSettings)

    _SECTIONS = {"collector": CollectorSettings, "codec": CodecSettings,
                 "search": SearchSettings, "forest": ForestSettings}

    @classmethod
    def from_dict(cls, blob: dict) -> "RunConfig":
        blob = dict(blob)
        known = {f.name for f in fields(cls)}
        unknown = set(blob) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        if "dataset" not in blob:
            raise ConfigError("config needs a 'dataset' path")
        for name, sect in cls._SECTIONS.items():
            sub = blob.get(name, {})
            if isinstance(sub, sect):
                continue
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            allowed = {f.name for f in fields(sect)}
            bad = set(sub) - allowed
            if bad:
                raise ConfigError(f"unknown field(s) in {name!r}: {sorted(bad)}")
            blob[name] = sect(**sub)
        try:
            return cls(**blob)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            blob = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(blob)

    def to_dict(self) -> dict:
        return asdict(self)

    def sub_seed(self, component: str) -> int:
        return derive_seed(self.seed, component)


# ---------------------------------------------------------------------------
# stage helpers


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, name: str, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kw)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc
        self.timings[name] = round(time.perf_counter() - t0, 3)
        log.info("stage %s done in %.1fs", name, self.timings[name])
        return out


BUNDLED_PREFIX = "bundled:"


def dataset_path(value: str) -> Path:
    """Resolve ``bundled:<name>`` to a packaged CSV; other values are file paths."""
    if value.startswith(BUNDLED_PREFIX):
        from . import bundled_dataset

        return Path(str(bundled_dataset(value[len(BUNDLED_PREFIX):])))
    return Path(value)


def load_dataset(config: RunConfig) -> ds.Dataset:
    return ds.load_csv(dataset_path(config.dataset), config.label_column, config.task)


def make_evaluator(dataset: ds.Dataset, config: RunConfig) -> Evaluator:
    f = config.forest
    forest = ForestConfig(n_trees=f.n_trees, max_features=f.max_features,
                          min_samples_leaf=f.min_samples_leaf, max_depth=f.max_depth)
    folds = ds.kfold(dataset.n_samples, config.folds, config.sub_seed("folds"))
    return Evaluator(dataset, folds, forest, seed=config.sub_seed("forest"),
                     positive_class=config.positive_class)


def codec_config(config: RunConfig, n_features: int) -> sc.CodecConfig:
    c = config.codec
    return sc.CodecConfig(
        n_features=n_features, d=c.d, heads=c.heads, n_inducing=c.n_inducing,
        max_len=c.max_len, rff_hidden=c.rff_hidden, lr=c.lr, batch_size=c.batch_size,
        epochs=c.epochs, seed=config.sub_seed("codec"),
        target_accuracy=c.target_accuracy, check_every=c.check_every,
        warmup_steps=c.warmup_steps,
    )


def search_config(config: RunConfig) -> ps.SearchConfig:
    return ps.SearchConfig(**asdict(config.search), seed=config.sub_seed("search"))


def collect_stage(dataset, evaluator, config: RunConfig) -> list[col.SelectionRecord]:
    return col.collect_records(dataset.n_features, evaluator.evaluate, config.collector.epochs,
                               seed=config.sub_seed("collector"))


def train_stage(records, dataset, config: RunConfig) -> sc.TrainResult:
    cc = codec_config(config, dataset.n_features)
    corpus = col.augment_records(records, config.augment_copies, cc.max_len,
                                 seed=config.sub_seed("augment"), n_features=dataset.n_features)
    return sc.train_codec(corpus, cc)


def random_baseline(evaluator: Evaluator, size: int, count: int, seed: int) -> list[float]:
    """Scores of ``count`` uniformly drawn subsets of ``size`` features."""
    rng = seeded_rng(seed)
    D = evaluator.dataset.n_features
    return [evaluator.evaluate(sorted(int(j) for j in rng.choice(D, size=size, replace=False)))
            for _ in range(count)]


# ---------------------------------------------------------------------------
# embeddings export


def export_embeddings(records: Sequence[col.SelectionRecord], codec: sc.CodecParams, path,
                      copies: int = 20, n_subsets: int = 5, seed: int = 0) -> int:
    """Write mean-pooled embeddings of a few subsets and their permutations.

    Permutation 0 is the ascending order.  Returns the number of data rows.
    """
    if codec.trained_epochs <= 0:
        raise ValueError("codec checkpoint is untrained")
    chosen = [s for s in col.top_k_seeds(records, len(records)) if len(s) >= 2][:n_subsets]
    rng = seeded_rng(seed)
    d = codec.config.d
    rows = 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# format_version={EMBEDDINGS_FORMAT_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(["subset_id", "permutation_id"] + [f"e_{i}" for i in range(d)])
        for sid, subset in enumerate(chosen):
            orders = [list(subset)] + [list(rng.permutation(subset)) for _ in range(copies)]
            for pid, order in enumerate(orders):
                pooled = sc.encode(order, codec).rows.mean(axis=0)
                w.writerow([sid, pid] + [repr(float(x)) for x in pooled])
                rows += 1
    return rows


# ---------------------------------------------------------------------------
# full run


def run_pipeline(config: RunConfig) -> dict:
    """Run every stage, write all artifacts and return the report dict."""
    stages = _Stages()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    dataset = stages.run("load", load_dataset, config)
    evaluator = make_evaluator(dataset, config)
    D = dataset.n_features

    records = stages.run("collect", collect_stage, dataset, evaluator, config)
    col.save_records(out / RECORDS_FILE, records)

    trained = stages.run("train", train_stage, records, dataset, config)
    sc.save_checkpoint(out / CHECKPOINT_FILE, trained.params)

    seeds = col.top_k_seeds(records, config.n_seeds)
    result = stages.run("search", ps.search, seeds, trained.params, evaluator.evaluate, search_config(config))
    ps.save_search_log(out / SEARCH_LOG_FILE, result.log)

    def final_eval():
        best = result.best_subset
        rand = random_baseline(evaluator, len(best), config.random_baseline_count, config.sub_seed("random-baseline"))
        return {
            "best_v": evaluator.evaluate(best),
            "all_v": evaluator.evaluate(list(range(D))),
            "random": rand,
            "folds": evaluator.fold_report(best),
            "holdout": evaluator.holdout_report(best),
            "all_folds": evaluator.fold_report(list(range(D))),
        }

    final = stages.run("evaluate", final_eval)
    best = result.best_subset
    seed_vs = [e.v for e in result.log if e.kind == "seed"]
    metric = evaluator.metric
    report = {
        "format_version": REPORT_FORMAT_VERSION,
        "format_versions": {
            "report": REPORT_FORMAT_VERSION,
            "records": col.RECORDS_FORMAT_VERSION,
            "checkpoint": sc.CHECKPOINT_FORMAT_VERSION,
            "search_log": ps.SEARCH_LOG_FORMAT_VERSION,
            "embeddings": EMBEDDINGS_FORMAT_VERSION,
        },
        "dataset": {"path": str(config.dataset), "n_samples": dataset.n_samples,
                    "n_features": D, "task": dataset.task, "metric": metric},
        "best_subset": {"indices": best, "names": [dataset.feature_names[j] for j in best]},
        "best_v": final["best_v"],
        "search_best_v": result.best_v,
        "max_seed_v": max(seed_vs),
        "baseline_all_features_v": final["all_v"],
        "random_baseline": {
            "size": len(best), "count": len(final["random"]),
            "median": float(np.median(final["random"])), "values": final["random"],
        },
        "subset_size_ratio": len(best) / D,
        "per_fold_metrics": final["folds"],
        "per_fold_metrics_all_features": final["all_folds"],
        "cv_mean": {k: float(np.mean([f[k] for f in final["folds"]])) for k in final["folds"][0]},
        "holdout_metrics": final["holdout"],
        "holdout_note": "80/20 split; cv_mean is the 5-fold mean used as the search score",
        "collector": {"records": len(records), "distinct": len({r.subset for r in records})},
        "codec": {
            "epochs_run": len(trained.loss_curve),
            "final_loss": trained.loss_curve[-1],
            "reconstruction_accuracy": trained.accuracy_curve[-1][1] if trained.accuracy_curve else None,
        },
        "search": {
            "seeds": len(seeds),
            "log_entries": len(result.log),
            "distinct_candidates": len({tuple(e.subset) for e in result.log}),
            "updates": len(result.diagnostics),
            "mean_clip_fraction": (float(np.mean([d.clip_fraction for d in result.diagnostics]))
                                   if result.diagnostics else None),
        },
        "config": config.to_dict(),
        "timings": stages.timings,
    }
    if config.figures:
        figs = out / "figures"
        figures.loss_curve(trained.loss_curve, figs / "codec_loss.png", ref=float(np.log(D + 1)))
        figures.search_trace(result.log, figs / "search_trace.png")
        figures.baseline_comparison(final["best_v"], len(best), final["all_v"], D, final["random"],
                                    figs / "baselines.png")
    (out / REPORT_FILE).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def strip_timings(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timings"}
