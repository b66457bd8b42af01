import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from models.schemas import DatasetSummary, RunConfig, Task
from services.evaluator import evaluate_per_prefix, next_activity_probabilities, top_k_activities
from services.event_log import (
    ActivityVocabulary,
    Event,
    Trace,
    build_vocabulary,
    chronological_split,
    log_statistics,
    parse_csv,
    timestamps_to_seconds,
    write_csv,
)
from services.features import (
    build_dataset,
    dump_samples_csv,
    fit_scaler,
    load_samples_csv,
    temporal_features,
)
from services.storage import ModelBundle, ModelStorage
from services.trainer import fit_training_scaler, train
from services.transformer import ProcessTransformer
from utils.errors import DivergedLoss, EventLogError, PrefixLongerThanMaxLen, ProcformerError, VersionMismatch

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
THREADS_ENV = "PROCFORMER_THREADS"
MODEL_FILE = "model.ptf"

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[
            logging.StreamHandler(),
            logging.FileHandler('procformer.log')
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value file with defaults for any flag")
    common.add_argument("--out", type=Path, help="directory for artifacts and reports (default: out)")
    common.add_argument("--seed", type=int, help="seed for every random choice (default: 42)")
    common.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    common.add_argument("--verbose", action="store_true", default=None, help="debug logging")
    common.add_argument("--quiet", action="store_true", default=None, help="warnings only, no progress bars")

    columns = _Parser(add_help=False)
    columns.add_argument("--case-col", help="case id column (default: case:concept:name)")
    columns.add_argument("--activity-col", help="activity column (default: concept:name)")
    columns.add_argument("--time-col", help="timestamp column (default: time:timestamp)")
    columns.add_argument("--time-format", help="ISO8601 or a strftime pattern (default: ISO8601)")

    parser = _Parser(prog="procformer", description="Transformer-based predictive process monitoring.")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    prepare = commands.add_parser("prepare", parents=[common, columns],
                                  help="split a log and write prefix samples, vocabulary and scaler")
    prepare.add_argument("--log", type=Path, help="event log CSV")
    prepare.add_argument("--train-fraction", type=float, help="share of traces used for training (default: 0.8)")
    prepare.add_argument("--max-len", type=int, help="longest prefix kept (default: longest trace)")

    train_cmd = commands.add_parser("train", parents=[common, columns], help="train a model")
    source = train_cmd.add_mutually_exclusive_group()
    source.add_argument("--log", type=Path, help="event log CSV")
    source.add_argument("--data", type=Path, help="directory written by `prepare`")
    train_cmd.add_argument("--model", type=Path, help=f"model file to write (default: OUT/{MODEL_FILE})")
    train_cmd.add_argument("--task", choices=[t.value for t in Task], help="prediction task (default: next_activity)")
    train_cmd.add_argument("--epochs", type=int, help="training epochs (default: 100)")
    train_cmd.add_argument("--lr", type=float, help="Adam learning rate (default: 0.01)")
    train_cmd.add_argument("--batch-size", type=int, help="samples per batch (default: 128)")
    train_cmd.add_argument("--heads", type=int, help="attention heads (default: 4)")
    train_cmd.add_argument("--embed-dim", type=int, help="embedding width (default: 36)")
    train_cmd.add_argument("--max-len", type=int, help="longest prefix (default: longest trace)")
    train_cmd.add_argument("--train-fraction", type=float, help="share of traces used for training (default: 0.8)")
    train_cmd.add_argument("--no-class-weights", dest="class_weighting", action="store_false", default=None,
                           help="plain cross-entropy for next_activity")
    train_cmd.add_argument("--timings", action="store_true", default=None,
                           help="include wall-clock seconds in the training report")

    evaluate = commands.add_parser("evaluate", parents=[common, columns], help="per-prefix evaluation")
    evaluate.add_argument("--model", type=Path, help="model file")
    evaluate.add_argument("--log", type=Path, help="event log CSV")
    evaluate.add_argument("--split", choices=["test", "all"], help="evaluate the hold-out traces or all (default: test)")

    predict = commands.add_parser("predict", parents=[common, columns], help="predict for one prefix")
    predict.add_argument("--model", type=Path, help="model file")
    predict.add_argument("--prefix", help="comma-separated activity labels")
    predict.add_argument("--timestamps", help="comma-separated timestamps, one per activity")
    predict.add_argument("--top-k", type=int, help="activities listed for next_activity (default: 5)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < environment (threads) < flags."""
    values: Dict[str, Any] = {}
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        for key, value in dotenv_values(args.config).items():
            values[key.strip().lower().replace("-", "_")] = value

    env_threads = os.getenv(THREADS_ENV)
    if env_threads:
        values["threads"] = env_threads

    flags = {k: v for k, v in vars(args).items() if v is not None and k != "config"}
    values.update(flags)
    values.setdefault("threads", os.cpu_count() or 1)
    return RunConfig(**values)


def _require(run: RunConfig, *names: str):
    for name in names:
        if getattr(run, name) is None:
            raise UsageError(f"{run.command}: --{name.replace('_', '-')} is required")
    if "model" in names and not run.model.is_file():
        raise UsageError(f"model file not found: {run.model}")


def _write_json(path: Path, payload: Any):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def format_statistics(summary: DatasetSummary) -> str:
    rows = [
        ("cases", f"{summary.cases:,}"),
        ("events", f"{summary.events:,}"),
        ("activities", f"{summary.activities}"),
        ("max case length", f"{summary.max_case_length}"),
        ("avg case length", f"{summary.avg_case_length:.2f}"),
        ("max duration (days)", f"{summary.max_duration_days:.2f}"),
        ("avg duration (days)", f"{summary.avg_duration_days:.2f}"),
    ]
    width = max(len(name) for name, _ in rows)
    return "\n".join([summary.source_name] + [f"  {name:<{width}}  {value}" for name, value in rows])


def cmd_prepare(run: RunConfig) -> DatasetSummary:
    _require(run, "log")
    mapping = run.column_mapping()
    logger.info("=== Preparing dataset ===")

    logger.info(f"Step 1: Parsing {run.log}...")
    log = parse_csv(run.log, mapping)
    summary = log_statistics(log)

    logger.info("Step 2: Chronological split...")
    train_log, test_log = chronological_split(log, run.train_fraction)
    vocab = build_vocabulary(train_log)
    max_len = run.max_len or log.max_trace_length

    logger.info("Step 3: Generating prefix samples...")
    clip = run.max_len is not None
    train_ds, train_stats = build_dataset(train_log, vocab, max_len, skip_long=clip)
    test_ds, test_stats = build_dataset(test_log, vocab, max_len, skip_long=clip)
    scaler = fit_scaler(train_ds.samples)

    logger.info(f"Step 4: Writing artifacts to {run.out}...")
    run.out.mkdir(parents=True, exist_ok=True)
    dump_samples_csv(train_ds.samples, run.out / "train_samples.csv")
    dump_samples_csv(test_ds.samples, run.out / "test_samples.csv")
    write_csv(train_log, run.out / "train_log.csv", mapping)
    write_csv(test_log, run.out / "test_log.csv", mapping)
    _write_json(run.out / "vocabulary.json", {"labels": list(vocab.labels), "ids": vocab.as_mapping()})
    _write_json(run.out / "scaler.json", scaler.to_dict())

    summary = summary.model_copy(update={
        "train_traces": len(train_log),
        "test_traces": len(test_log),
        "train_samples": len(train_ds),
        "test_samples": len(test_ds),
        "skipped_short_traces": train_stats.skipped_short + test_stats.skipped_short,
        "max_len": max_len,
    })
    _write_json(run.out / "summary.json", {**summary.model_dump(mode="json"), "train_fraction": run.train_fraction})
    print(format_statistics(summary))
    logger.info(f"✅ Prepared {len(train_ds)} train / {len(test_ds)} test samples")
    return summary


def _load_prepared(directory: Path):
    try:
        vocab = ActivityVocabulary(json.loads((directory / "vocabulary.json").read_text(encoding="utf-8"))["labels"])
        summary = json.loads((directory / "summary.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise UsageError(f"{directory} is not a prepared dataset directory ({e.filename} missing)")
    dataset = load_samples_csv(directory / "train_samples.csv", len(vocab), summary["max_len"])
    return dataset, vocab, float(summary.get("train_fraction", 0.8))


def cmd_train(run: RunConfig) -> Path:
    if run.log is None and run.data is None:
        raise UsageError("train: one of --log or --data is required")
    logger.info(f"=== Training {run.task.value} model ===")

    if run.data is not None:
        logger.info(f"Step 1: Loading prepared samples from {run.data}...")
        dataset, vocab, train_fraction = _load_prepared(run.data)
        max_len = dataset.max_len
    else:
        logger.info(f"Step 1: Parsing {run.log}...")
        log = parse_csv(run.log, run.column_mapping())
        train_log, _ = chronological_split(log, run.train_fraction)
        vocab = build_vocabulary(train_log)
        max_len = run.max_len or log.max_trace_length
        dataset, _ = build_dataset(train_log, vocab, max_len, skip_long=run.max_len is not None)
        train_fraction = run.train_fraction

    logger.info("Step 2: Training...")
    model_config = run.build_model_config(len(vocab), max_len)
    train_config = run.train_config()
    scaler = fit_training_scaler(dataset, train_config.validation_fraction)
    params, report = train(dataset, model_config, train_config, scaler)

    logger.info("Step 3: Saving model and report...")
    run.out.mkdir(parents=True, exist_ok=True)
    model_path = run.model or run.out / MODEL_FILE
    ModelStorage().save(ModelBundle(model_config, params, vocab, scaler, train_fraction), model_path)
    (run.out / "train_report.csv").write_text(report.to_csv(run.timings), encoding="utf-8")
    _write_json(run.out / "train_report.json", report.summary(run.timings))
    if report.epochs:
        best = report.epochs[report.best_epoch - 1]
        print(f"best epoch {report.best_epoch}: validation {report.metric_name} {best.val_metric:.4f}")
    else:
        print("no epochs run; model holds its initial weights")
    return model_path


def cmd_evaluate(run: RunConfig):
    _require(run, "model", "log")
    logger.info("=== Evaluating model ===")
    bundle = ModelStorage().load(run.model)
    log = parse_csv(run.log, run.column_mapping())
    if not any(activity in bundle.vocabulary for activity in log.activities):
        raise VersionMismatch(
            "none of the log's activities are in the model vocabulary; it was trained on another process",
            source=str(run.log),
        )

    evaluated = log if run.split == "all" else chronological_split(log, bundle.train_fraction)[1]
    dataset, _ = build_dataset(evaluated, bundle.vocabulary, bundle.config.max_len, skip_long=True)
    model = ProcessTransformer(bundle.config, bundle.params)
    report = evaluate_per_prefix(model, dataset, bundle.scaler, run.threads)

    run.out.mkdir(parents=True, exist_ok=True)
    _write_json(run.out / "eval_report.json", report.model_dump(mode="json"))
    (run.out / "eval_report.csv").write_text(report.to_csv(), encoding="utf-8")
    for name in sorted(report.averaged):
        print(f"{report.task.value} {name}: averaged {report.averaged[name]:.4f} pooled {report.overall[name]:.4f}")
    return report


def _split_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def cmd_predict(run: RunConfig) -> Dict[str, Any]:
    _require(run, "model", "prefix")
    bundle = ModelStorage().load(run.model)
    config, vocab = bundle.config, bundle.vocabulary
    labels = _split_list(run.prefix)
    if not labels:
        raise UsageError("predict: --prefix needs at least one activity")
    if len(labels) > config.max_len:
        raise PrefixLongerThanMaxLen(f"prefix of {len(labels)} events exceeds max_len={config.max_len}")

    if run.timestamps is not None:
        stamps = timestamps_to_seconds(_split_list(run.timestamps), run.column_mapping(), "--timestamps")
        if len(stamps) != len(labels):
            raise UsageError(f"predict: {len(labels)} activities but {len(stamps)} timestamps")
    elif config.task.is_regression:
        raise UsageError(f"predict: --timestamps is required for {config.task.value}")
    else:
        stamps = [0] * len(labels)
    if any(b < a for a, b in zip(stamps, stamps[1:])):
        raise EventLogError("timestamps must be non-decreasing", source="--timestamps")

    prefix = Trace("prefix", tuple(Event(a, "prefix", t) for a, t in zip(labels, stamps)))
    ids = np.zeros((1, config.max_len), dtype=np.int64)
    ids[0, :len(labels)] = vocab.encode_many(labels)
    model = ProcessTransformer(config, bundle.params)

    result: Dict[str, Any] = {
        "task": config.task.value,
        "prefix": labels,
        "unknown_activities": sorted({a for a in labels if a not in vocab}),
    }
    if config.task is Task.NEXT_ACTIVITY:
        probs = next_activity_probabilities(model.predict(ids))[0]
        result["top_k"] = top_k_activities(probs, vocab, run.top_k)
    else:
        fv = bundle.scaler.scale_fv(np.asarray(temporal_features(prefix)))[None, :]
        days = float(bundle.scaler.unscale_target(config.task, model.predict(ids, fv))[0])
        result["clamped"] = days < 0
        result["days"] = max(days, 0.0)
        if config.task is Task.NEXT_TIME:
            when = pd.Timestamp(prefix.end, unit="s", tz="UTC") + pd.Timedelta(days=result["days"])
            result["timestamp"] = when.isoformat()
    print(json.dumps(result, indent=2))
    return result


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; the return value is the process exit code."""
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
        run = resolve_config(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"procformer: invalid configuration\n{e}", file=sys.stderr)
        return 1

    configure_logging(run.verbose, run.quiet)
    try:
        COMMANDS[run.command](run)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except ValidationError as e:
        print(f"procformer: invalid configuration\n{e}", file=sys.stderr)
        return 1
    except ProcformerError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        if isinstance(e, DivergedLoss):
            logger.error(f"Last finite epoch: {e.last_finite_epoch}")
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
