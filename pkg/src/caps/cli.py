"""Command-line entry point: ``caps <subcommand> --config run.json``.

Every subcommand reads and writes files in the run directory, so stages can be
re-run on their own.  Summaries go to stdout as tab-separated ``key value``
lines.  Exit codes: 0 success, 1 stage error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import collector as col
from . import pipeline as pl
from . import policy_search as ps
from . import set_codec as sc

EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def _emit(rows) -> None:
    for key, value in rows:
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = f"{value:.6f}"
        print(f"{key}\t{value}")


def _config(args) -> pl.RunConfig:
    cfg = pl.RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "dataset", None) is not None:
        cfg.dataset = args.dataset
    return cfg


def _parse_subset(text: str) -> list[int]:
    try:
        ids = sorted({int(t) for t in text.replace(" ", "").split(",") if t})
    except ValueError as exc:
        raise pl.ConfigError(f"subset must be comma-separated integers, got {text!r}") from exc
    if not ids:
        raise pl.ConfigError("subset is empty")
    return ids


def _load_stage(name, fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise pl.StageError(name, exc) from exc


def cmd_run(cfg: pl.RunConfig, args) -> None:
    report = pl.run_pipeline(cfg)
    _emit([
        ("best_subset", report["best_subset"]["indices"]),
        ("best_names", report["best_subset"]["names"]),
        ("best_v", report["best_v"]),
        ("all_features_v", report["baseline_all_features_v"]),
        ("random_median_v", report["random_baseline"]["median"]),
        ("size_ratio", report["subset_size_ratio"]),
        ("report", str(Path(cfg.out_dir) / pl.REPORT_FILE)),
    ])


def cmd_collect(cfg: pl.RunConfig, args) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_stage("load", pl.load_dataset, cfg)
    evaluator = pl.make_evaluator(dataset, cfg)
    records = _load_stage("collect", pl.collect_stage, dataset, evaluator, cfg)
    col.save_records(out / pl.RECORDS_FILE, records)
    _emit([("records", len(records)), ("distinct", len({r.subset for r in records})),
           ("best_v", max(r.v for r in records)), ("path", str(out / pl.RECORDS_FILE))])


def cmd_train(cfg: pl.RunConfig, args) -> None:
    out = Path(cfg.out_dir)
    dataset = _load_stage("load", pl.load_dataset, cfg)
    records = _load_stage("load-records", col.load_records, out / pl.RECORDS_FILE)
    trained = _load_stage("train", pl.train_stage, records, dataset, cfg)
    sc.save_checkpoint(out / pl.CHECKPOINT_FILE, trained.params)
    rows = [("epochs", trained.params.trained_epochs), ("final_loss", trained.loss_curve[-1])]
    if trained.accuracy_curve:
        rows.append(("reconstruction", trained.accuracy_curve[-1][1]))
    rows.append(("path", str(out / pl.CHECKPOINT_FILE)))
    _emit(rows)


def cmd_search(cfg: pl.RunConfig, args) -> None:
    out = Path(cfg.out_dir)
    dataset = _load_stage("load", pl.load_dataset, cfg)
    evaluator = pl.make_evaluator(dataset, cfg)
    records = _load_stage("load-records", col.load_records, out / pl.RECORDS_FILE)
    codec = _load_stage("load-codec", sc.load_checkpoint, out / pl.CHECKPOINT_FILE)
    seeds = col.top_k_seeds(records, cfg.n_seeds)
    result = _load_stage("search", ps.search, seeds, codec, evaluator.evaluate, pl.search_config(cfg))
    ps.save_search_log(out / pl.SEARCH_LOG_FILE, result.log)
    _emit([("best_subset", result.best_subset), ("best_v", result.best_v),
           ("log_entries", len(result.log)), ("path", str(out / pl.SEARCH_LOG_FILE))])


def cmd_eval(cfg: pl.RunConfig, args) -> None:
    subset = _parse_subset(args.subset)
    dataset = _load_stage("load", pl.load_dataset, cfg)
    evaluator = pl.make_evaluator(dataset, cfg)
    v = _load_stage("evaluate", evaluator.evaluate, subset)
    folds = evaluator.fold_report(subset)
    rows = [("subset", subset), ("v", v), ("metric", evaluator.metric)]
    for i, fold in enumerate(folds):
        rows.extend((f"fold{i}_{k}", val) for k, val in sorted(fold.items()))
    _emit(rows)


def cmd_export(cfg: pl.RunConfig, args) -> None:
    out = Path(cfg.out_dir)
    records = _load_stage("load-records", col.load_records, out / pl.RECORDS_FILE)
    codec = _load_stage("load-codec", sc.load_checkpoint, out / pl.CHECKPOINT_FILE)
    path = Path(args.path) if args.path else out / pl.EMBEDDINGS_FILE
    rows = _load_stage("export", pl.export_embeddings, records, codec, path, args.copies,
                       cfg.export_subsets, cfg.sub_seed("export"))
    _emit([("rows", rows), ("path", str(path))])


COMMANDS = {
    "run": (cmd_run, "full pipeline: collect, train, search, report"),
    "collect": (cmd_collect, "explore subsets and write the records file"),
    "train": (cmd_train, "train the set codec on the records file"),
    "search": (cmd_search, "policy search from the top records"),
    "eval": (cmd_eval, "cross-validated score of one subset"),
    "export-embeddings": (cmd_export, "pooled embeddings of subsets and their permutations"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caps", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--out", help="run directory (overrides the config)")
        p.add_argument("--dataset", help="dataset CSV (overrides the config)")
        if name == "eval":
            p.add_argument("subset", help="comma-separated feature indices, e.g. 0,3,7")
        if name == "export-embeddings":
            p.add_argument("--copies", type=int, default=20, help="permutations per subset")
            p.add_argument("--path", help="output CSV (default: <out>/embeddings.csv)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command][0](cfg, args)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
