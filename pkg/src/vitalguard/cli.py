"""Command-line pipeline: synthesize, inject, train, evaluate, ablate, filter.

Each subcommand reads inputs, writes one output directory containing a
manifest.json that records the fully resolved arguments, and never mutates
its inputs. Exit codes: 0 success, 1 runtime failure, 2 usage or config
error. Option precedence everywhere is CLI flag > config file > built-in
default.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (
    AttackType,
    InjectionPlan,
    inject,
    load_injection_plan,
    read_events_jsonl,
    save_injection_plan,
    write_events_jsonl,
)
from .errors import CalibrationError, ConfigError, ParseError, ShapeError
from .evaluation import (
    ABLATION_GRIDS,
    ablation_table_csv,
    evaluate_model,
    evaluation_json,
    run_ablation,
    severity_sweep,
    sweep_csv,
)
from .metrics import metrics_from_predictions
from .model import FULL_MASK, ModelConfig, load_checkpoint, save_checkpoint
from .plausibility import (
    BUILTIN_BOUNDS,
    builtin_bounds,
    filter_prediction,
    load_bounds,
)
from .streams import (
    ChannelStats,
    SensorRecord,
    SplitAssignment,
    calibrate,
    extract_windows,
    ingest_csv,
    preprocess,
    read_labels_csv,
    split_records,
    write_labels_csv,
    write_record_csv,
)
from .substrate import (
    default_substrate_config,
    load_substrate_config,
    save_substrate_config,
    synthesize_substrate,
)
from .training import TrainConfig, train

USAGE_ERROR = 2
RUNTIME_ERROR = 1

# exception classes that signal a problem with user inputs, not the run
_USAGE_ERRORS = (
    ConfigError,
    ParseError,
    CalibrationError,
    ShapeError,
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
    json.JSONDecodeError,
)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _prepare_out(out: str | Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, args: dict) -> Path:
    """One manifest per output directory; args hold every resolved value
    needed to re-run the command."""
    manifest = {
        "command": command,
        "version": __version__,
        "timestamp": _utc_now(),
        "args": args,
    }
    path = out / "manifest.json"
    with path.open("w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(out_dir: str | Path) -> dict:
    with (Path(out_dir) / "manifest.json").open() as fh:
        return json.load(fh)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with p.open() as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return obj


def _resolve(flag_value, config_section: dict, key: str, default):
    """CLI flag > config file entry > built-in default."""
    if flag_value is not None:
        return flag_value
    if key in config_section:
        return config_section[key]
    return default


def _build_dataclass(cls, flags: dict, section: dict, fixed: dict | None = None):
    fixed = fixed or {}
    unknown = set(section) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)} for {cls.__name__}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in fixed:
            kwargs[f.name] = fixed[f.name]
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[f.name] = _resolve(flags.get(f.name), section, f.name, default)
    return cls(**kwargs)


def _load_bounds_arg(name_or_path: str):
    if name_or_path in BUILTIN_BOUNDS:
        return builtin_bounds(name_or_path)
    return load_bounds(name_or_path)


def _record_dir(dataset: str | Path) -> Path:
    d = Path(dataset) / "records"
    if not d.is_dir():
        raise ConfigError(f"dataset {dataset}: no records/ directory")
    return d


def _load_records(dataset: str | Path) -> dict[str, SensorRecord]:
    records = {}
    for path in sorted(_record_dir(dataset).glob("*.csv")):
        rec = preprocess(ingest_csv(path))
        if isinstance(rec, SensorRecord):
            records[rec.record_id] = rec
    if not records:
        raise ConfigError(f"dataset {dataset}: no usable records")
    return records


def _load_splits(dataset: str | Path) -> SplitAssignment:
    path = Path(dataset) / "splits.json"
    if not path.exists():
        raise ConfigError(f"dataset {dataset}: missing splits.json")
    with path.open() as fh:
        obj = json.load(fh)
    return SplitAssignment(
        train=tuple(obj["train"]), val=tuple(obj["val"]), test=tuple(obj["test"])
    )


def _load_stats(dataset: str | Path) -> list[ChannelStats]:
    path = Path(dataset) / "stats.json"
    if not path.exists():
        raise ConfigError(f"dataset {dataset}: missing stats.json")
    with path.open() as fh:
        obj = json.load(fh)
    return [ChannelStats(c["name"], float(c["mean"]), float(c["sd"])) for c in obj]


def _split_windows(
    dataset: str | Path,
    ids: tuple[str, ...],
    window_len: int,
    stride: int,
    records: dict[str, SensorRecord] | None = None,
):
    records = records if records is not None else _load_records(dataset)
    stats = _load_stats(dataset)
    labels_dir = Path(dataset) / "labels"
    windows = []
    for record_id in ids:
        if record_id not in records:
            raise ConfigError(f"dataset {dataset}: split names unknown record {record_id!r}")
        labels = read_labels_csv(labels_dir / f"{record_id}.csv")
        windows.extend(
            extract_windows(records[record_id], labels, window_len, stride, stats)
        )
    return windows


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    if args.config is not None and not Path(args.config).exists():
        raise ConfigError(f"config file not found: {args.config}")
    config = (
        load_substrate_config(args.config)
        if args.config is not None
        else default_substrate_config()
    )
    seed = args.seed if args.seed is not None else 0
    out = _prepare_out(args.out, args.force)
    records = synthesize_substrate(config, seed, args.n_records, args.n_steps)
    rec_dir = out / "records"
    rec_dir.mkdir(exist_ok=True)
    for rec in records:
        write_record_csv(rec, rec_dir / f"{rec.record_id}.csv")
    save_substrate_config(config, out / "substrate.json")
    write_manifest(
        out,
        "synth",
        {
            "config": args.config,
            "seed": seed,
            "n_records": args.n_records,
            "n_steps": args.n_steps,
            "out": str(out),
        },
    )
    print(f"synth: wrote {len(records)} records to {out}")
    return 0


def cmd_inject(args) -> int:
    if args.config is not None:
        plan = load_injection_plan(args.config)
    else:
        plan = InjectionPlan(
            probability=0.05,
            types=tuple(AttackType),
            levels=(1, 2, 3, 4),
            seed=None,
        )
    seed = args.seed if args.seed is not None else plan.seed
    if seed is None:
        seed = 0
    probability = args.probability if args.probability is not None else plan.probability
    plan = InjectionPlan(
        probability=probability, types=plan.types, levels=plan.levels, seed=seed
    )

    records = _load_records(args.dataset)
    out = _prepare_out(args.out, args.force)
    split = split_records(sorted(records), seed=seed)
    stats = calibrate([records[i] for i in split.train])
    severities = plan.severities()

    rec_dir = out / "records"
    lab_dir = out / "labels"
    rec_dir.mkdir(exist_ok=True)
    lab_dir.mkdir(exist_ok=True)
    all_events = []
    n_events = 0
    for idx, record_id in enumerate(sorted(records)):
        result = inject(
            records[record_id],
            stats,
            plan.probability,
            severities,
            np.random.SeedSequence([seed, idx]),
        )
        write_record_csv(result.corrupted, rec_dir / f"{record_id}.csv")
        write_labels_csv(result.labels, lab_dir / f"{record_id}.csv")
        all_events.extend((record_id, e) for e in result.events)
        n_events += len(result.events)

    write_events_jsonl(out / "events.jsonl", all_events)
    with (out / "splits.json").open("w") as fh:
        json.dump(
            {"train": split.train, "val": split.val, "test": split.test},
            fh,
            indent=2,
        )
        fh.write("\n")
    with (out / "stats.json").open("w") as fh:
        json.dump(
            [{"name": s.name, "mean": s.mean, "sd": s.sd} for s in stats],
            fh,
            indent=2,
        )
        fh.write("\n")
    save_injection_plan(plan, out / "plan.json")
    write_manifest(
        out,
        "inject",
        {
            "dataset": str(args.dataset),
            "config": args.config,
            "seed": seed,
            "probability": plan.probability,
            "types": [t.value for t in plan.types],
            "levels": list(plan.levels),
            "out": str(out),
        },
    )
    print(f"inject: {n_events} events over {len(records)} records -> {out}")
    return 0


_MODEL_FLAGS = ("window_len", "n_blocks", "conv_mid", "kernel_size", "dropout", "share_blocks")
_TRAIN_FLAGS = (
    "learning_rate",
    "beta1",
    "beta2",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
)


def _model_and_train_configs(args, n_channels: int):
    file_config = _load_config_file(args.config)
    unknown = set(file_config) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    model_config = _build_dataclass(
        ModelConfig,
        {k: getattr(args, k) for k in _MODEL_FLAGS},
        file_config.get("model", {}),
        fixed={"channels": n_channels},
    )
    train_config = _build_dataclass(
        TrainConfig,
        {k: getattr(args, k) for k in _TRAIN_FLAGS},
        file_config.get("train", {}),
    )
    return model_config, train_config


def cmd_train(args) -> int:
    records = _load_records(args.dataset)
    first = records[sorted(records)[0]]
    model_config, train_config = _model_and_train_configs(args, first.n_channels)
    split = _load_splits(args.dataset)
    stride = args.stride if args.stride is not None else 1
    train_windows = _split_windows(
        args.dataset, split.train, model_config.window_len, stride, records
    )
    val_windows = _split_windows(
        args.dataset, split.val, model_config.window_len, stride, records
    )
    out = _prepare_out(args.out, args.force)
    result = train(train_windows, val_windows, model_config, train_config)
    save_checkpoint(out / "checkpoint.json", result.params, model_config, FULL_MASK)
    with (out / "history.json").open("w") as fh:
        json.dump(
            {
                "best_epoch": result.best_epoch,
                "best_val_f1": result.best_val_f1,
                "pos_weight": result.pos_weight,
                "epochs": result.history,
            },
            fh,
            indent=2,
        )
        fh.write("\n")
    write_manifest(
        out,
        "train",
        {
            "dataset": str(args.dataset),
            "config": args.config,
            "stride": stride,
            "model": dataclasses.asdict(model_config),
            "train": dataclasses.asdict(train_config),
            "out": str(out),
        },
    )
    print(
        f"train: best val F1 {result.best_val_f1:.4f} at epoch {result.best_epoch} -> {out}"
    )
    return 0


def cmd_eval(args) -> int:
    params, model_config, mask = load_checkpoint(args.checkpoint)
    split = _load_splits(args.dataset)
    ids = getattr(split, args.split)
    if not ids:
        raise ConfigError(f"split {args.split!r} is empty")
    stride = args.stride if args.stride is not None else 1
    windows = _split_windows(args.dataset, ids, model_config.window_len, stride)
    bounds = _load_bounds_arg(args.ppf) if args.ppf is not None else None
    result = evaluate_model(
        windows,
        params,
        model_config,
        mask,
        bounds=bounds,
        record_rate_hz=args.rate,
        threshold=args.threshold,
    )
    out = _prepare_out(args.out, args.force)

    metrics = evaluation_json(result, config_name=args.split, seed=0)
    metrics["n_windows"] = len(windows)
    metrics["pre_filter"] = {
        "sensitivity": result.metrics.sensitivity,
        "precision": result.metrics.precision,
        "f1": result.metrics.f1,
        "accuracy": result.metrics.accuracy,
    }
    metrics["post_filter"] = (
        None
        if result.filtered_metrics is None
        else {
            "sensitivity": result.filtered_metrics.sensitivity,
            "precision": result.filtered_metrics.precision,
            "f1": result.filtered_metrics.f1,
            "accuracy": result.filtered_metrics.accuracy,
        }
    )
    with (out / "metrics.json").open("w") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")

    with (out / "predictions.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["record_id", "end_time", "label", "score", "prediction"]
        if result.filtered_predictions is not None:
            header.append("filtered_prediction")
        writer.writerow(header)
        for i, w in enumerate(windows):
            row = [
                w.record_id,
                w.end_time,
                w.label,
                repr(float(result.scores[i])),
                int(result.predictions[i]),
            ]
            if result.filtered_predictions is not None:
                row.append(int(result.filtered_predictions[i]))
            writer.writerow(row)

    events_path = Path(args.dataset) / "events.jsonl"
    if events_path.exists():
        events_by_record: dict = {}
        for record_id, event in read_events_jsonl(events_path):
            events_by_record.setdefault(record_id, []).append(event)
        rows = severity_sweep(windows, result.effective_predictions, events_by_record)
        sweep_csv(rows, out / "sweep.csv")

    write_manifest(
        out,
        "eval",
        {
            "dataset": str(args.dataset),
            "checkpoint": str(args.checkpoint),
            "split": args.split,
            "stride": stride,
            "ppf": args.ppf,
            "rate": args.rate,
            "threshold": args.threshold,
            "out": str(out),
        },
    )
    m = result.effective_metrics
    print(
        f"eval: sensitivity {m.sensitivity:.4f} f1 {m.f1:.4f} "
        f"on {len(windows)} {args.split} windows -> {out}"
    )
    return 0


def cmd_ablate(args) -> int:
    grid_name = args.grid if args.grid is not None else "standard7"
    if grid_name not in ABLATION_GRIDS:
        raise ConfigError(
            f"unknown grid {grid_name!r}; available: {sorted(ABLATION_GRIDS)}"
        )
    grid = ABLATION_GRIDS[grid_name]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0]

    records = _load_records(args.dataset)
    first = records[sorted(records)[0]]
    model_config, train_config = _model_and_train_configs(args, first.n_channels)
    split = _load_splits(args.dataset)
    stride = args.stride if args.stride is not None else 1
    tr = _split_windows(args.dataset, split.train, model_config.window_len, stride, records)
    va = _split_windows(args.dataset, split.val, model_config.window_len, stride, records)
    te = _split_windows(args.dataset, split.test, model_config.window_len, stride, records)
    bounds = _load_bounds_arg(args.ppf) if args.ppf is not None else None

    out = _prepare_out(args.out, args.force)
    collected = []
    for seed in seeds:
        seeded = dataclasses.replace(train_config, seed=seed)
        rows = run_ablation(
            tr, va, te, model_config, seeded, grid=grid, bounds=bounds, record_rate_hz=args.rate
        )
        ablation_table_csv(rows, out / f"ablation_seed{seed}.csv")
        for row in rows:
            entry = evaluation_json(row.result, row.name, seed)
            mc = row.mcnemar_vs_full
            entry["mcnemar_statistic"] = None if mc is None else mc.statistic
            entry["mcnemar_p"] = None if mc is None else mc.p_value
            collected.append(entry)
    with (out / "ablation.json").open("w") as fh:
        json.dump(collected, fh, indent=2)
        fh.write("\n")
    write_manifest(
        out,
        "ablate",
        {
            "dataset": str(args.dataset),
            "config": args.config,
            "grid": grid_name,
            "seeds": seeds,
            "stride": stride,
            "ppf": args.ppf,
            "rate": args.rate,
            "model": dataclasses.asdict(model_config),
            "train": dataclasses.asdict(train_config),
            "out": str(out),
        },
    )
    print(f"ablate: {len(grid)} configs x {len(seeds)} seeds -> {out}")
    return 0


def cmd_ppf(args) -> int:
    bounds = _load_bounds_arg(args.ppf)
    window_len = args.window_len if args.window_len is not None else 15
    records = _load_records(args.dataset)
    pred_path = Path(args.predictions)
    if not pred_path.exists():
        raise ConfigError(f"predictions file not found: {pred_path}")
    with pred_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "prediction" not in reader.fieldnames:
            raise ParseError(f"{pred_path}: missing 'prediction' column")
        fieldnames = [c for c in reader.fieldnames if c != "filtered_prediction"]
        rows = list(reader)
    has_labels = "label" in fieldnames

    out = _prepare_out(args.out, args.force)
    filtered = []
    predictions = []
    labels = []
    for line_no, row in enumerate(rows, start=2):
        record_id = row["record_id"]
        if record_id not in records:
            raise ConfigError(
                f"{pred_path}: line {line_no}: unknown record {record_id!r}"
            )
        rec = records[record_id]
        end = int(row["end_time"])
        if not window_len - 1 <= end < rec.n_steps:
            raise ConfigError(
                f"{pred_path}: line {line_no}: end_time {end} out of range"
            )
        raw = rec.values[:, end - window_len + 1 : end + 1]
        pred = int(row["prediction"])
        kept = filter_prediction(
            pred, raw, rec.channel_names, bounds, args.rate
        )
        predictions.append(pred)
        filtered.append(kept)
        if has_labels:
            labels.append(int(row["label"]))

    with (out / "filtered_predictions.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames + ["filtered_prediction"])
        for row, kept in zip(rows, filtered):
            writer.writerow([row[c] for c in fieldnames] + [kept])

    if has_labels and any(y == 1 for y in labels):
        pre = metrics_from_predictions(predictions, labels)
        post = metrics_from_predictions(filtered, labels)
        with (out / "metrics.json").open("w") as fh:
            json.dump(
                {
                    "pre_filter": {
                        "sensitivity": pre.sensitivity,
                        "precision": pre.precision,
                        "f1": pre.f1,
                        "accuracy": pre.accuracy,
                    },
                    "post_filter": {
                        "sensitivity": post.sensitivity,
                        "precision": post.precision,
                        "f1": post.f1,
                        "accuracy": post.accuracy,
                    },
                    "suppressed": int(np.sum(np.array(predictions) - np.array(filtered))),
                },
                fh,
                indent=2,
            )
            fh.write("\n")

    write_manifest(
        out,
        "ppf",
        {
            "dataset": str(args.dataset),
            "predictions": str(args.predictions),
            "ppf": args.ppf,
            "window_len": window_len,
            "rate": args.rate,
            "out": str(out),
        },
    )
    n_suppressed = sum(p - f for p, f in zip(predictions, filtered))
    print(f"ppf: suppressed {n_suppressed} of {sum(predictions)} positives -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master RNG seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument(
        "--force", action="store_true", help="allow writing into a non-empty directory"
    )

    parser = argparse.ArgumentParser(
        prog="vitalguard",
        description="Synthetic physiological streams, falsified-reading "
        "injection, and a dual-axis attention detector.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="synthesize clean records")
    p.add_argument("--n-records", type=int, default=50)
    p.add_argument("--n-steps", type=int, default=500)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inject", parents=[common], help="inject attacks into a dataset")
    p.add_argument("--dataset", required=True, help="directory from synth")
    p.add_argument("--probability", type=float, default=None)
    p.set_defaults(func=cmd_inject)

    def add_model_train_flags(p):
        p.add_argument("--window-len", dest="window_len", type=int, default=None)
        p.add_argument("--n-blocks", dest="n_blocks", type=int, default=None)
        p.add_argument("--conv-mid", dest="conv_mid", type=int, default=None)
        p.add_argument("--kernel-size", dest="kernel_size", type=int, default=None)
        p.add_argument("--dropout", type=float, default=None)
        p.add_argument(
            "--share-blocks",
            dest="share_blocks",
            action="store_const",
            const=True,
            default=None,
        )
        p.add_argument("--lr", dest="learning_rate", type=float, default=None)
        p.add_argument("--beta1", type=float, default=None)
        p.add_argument("--beta2", type=float, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
        p.add_argument("--patience", type=int, default=None)
        p.add_argument("--stride", type=int, default=None)

    p = sub.add_parser("train", parents=[common], help="train the detector")
    p.add_argument("--dataset", required=True, help="directory from inject")
    add_model_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--dataset", required=True, help="directory from inject")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--ppf", default=None, help="bounds file or builtin name")
    p.add_argument("--rate", type=float, default=None, help="record step rate in Hz")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    p.add_argument("--dataset", required=True, help="directory from inject")
    p.add_argument("--grid", default=None, help="named configuration grid")
    p.add_argument("--seeds", default=None, help="comma-separated training seeds")
    p.add_argument("--ppf", default=None, help="bounds file or builtin name")
    p.add_argument("--rate", type=float, default=None)
    add_model_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ppf", parents=[common], help="filter a predictions file")
    p.add_argument("--dataset", required=True, help="directory holding the records")
    p.add_argument("--predictions", required=True, help="predictions CSV from eval")
    p.add_argument("--ppf", required=True, help="bounds file or builtin name")
    p.add_argument("--window-len", dest="window_len", type=int, default=None)
    p.add_argument("--rate", type=float, default=None)
    p.set_defaults(func=cmd_ppf)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version, 2 for usage errors
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
