"""Command-line entry point.

Subcommands: synth-data, train, calibrate-threshold, separate, count,
evaluate, report.  Every flag mirrors a config key
(``--train.scheme=orpit_multi``); ``--config FILE`` loads a key-value file
first, then flags override.  Exit codes: 0 success, 2 configuration error,
3 runtime failure.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .counting import (calibrate_threshold, count_fixed_outputs,
                       extract_iteratively)
from .evaluation import aggregate_records, format_table, load_records, run_eval
from .separator import load_separator
from .signals import build_dataset, load_manifest, read_wav, write_wav
from .training import run_training

COMMANDS = ("synth-data", "train", "calibrate-threshold", "separate", "count",
            "evaluate", "report")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sepcount",
        description="Multi-talker separation, counting, and recognition toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key-value config file")
    return parser


def _cmd_synth_data(config: ExperimentConfig) -> None:
    manifest = build_dataset(config.dataset_spec())
    print(f"wrote {len(manifest.entries)} examples to {manifest.path}")


def _cmd_train(config: ExperimentConfig) -> None:
    artifacts = run_training(config)
    print(f"training log: {artifacts.log_path}")
    print(f"last checkpoint: {artifacts.last_checkpoint}")
    print(f"best checkpoint: {artifacts.best_checkpoint}")


def _cmd_calibrate(config: ExperimentConfig) -> None:
    model = load_separator(config.require("calibrate.checkpoint"))
    manifest = load_manifest(config.require("calibrate.manifest"))
    result = calibrate_threshold(model, manifest.load_examples(),
                                 max_iterations=config["stop.max_iterations"])
    if config["calibrate.out"]:
        result.save(config["calibrate.out"])
    print(f"gamma={result.gamma:.3e} accuracy={result.accuracy:.3f}")


def _cmd_separate(config: ExperimentConfig) -> None:
    model = load_separator(config.require("eval.checkpoint"))
    wav = read_wav(config.require("separate.input"))
    out_dir = Path(config.require("separate.out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(config["separate.input"]).stem
    if config["separate.iterative"]:
        result = extract_iteratively(wav, model, config.stop_rule())
        streams = result.streams
        print(f"estimated talkers: {result.count}")
    else:
        streams = model.separate(wav).streams
    for i, stream in enumerate(streams):
        path = out_dir / f"{stem}_s{i}.wav"
        write_wav(path, stream)
        print(f"wrote {path}")


def _cmd_count(config: ExperimentConfig) -> None:
    model = load_separator(config.require("eval.checkpoint"))
    rule = config.stop_rule()

    def count_one(wav) -> int:
        if model.num_outputs == 2:
            return extract_iteratively(wav, model, rule).count
        return count_fixed_outputs(model.separate(wav).streams, rule.gamma)

    if config["count.manifest"]:
        manifest = load_manifest(config["count.manifest"])
        for entry in manifest.entries:
            wav = read_wav(manifest.root / entry.mix)
            print(f"{entry.id}\tpredicted={count_one(wav)}\ttrue={entry.k}")
    else:
        wav = read_wav(config.require("count.input"))
        print(f"predicted={count_one(wav)}")


def _cmd_evaluate(config: ExperimentConfig) -> None:
    report = run_eval(config)
    print(report.table, end="")
    if report.records_path:
        print(f"records: {report.records_path}")


def _cmd_report(config: ExperimentConfig) -> None:
    records = load_records(config.require("report.records"))
    if not records:
        raise ConfigError("no records to report")
    print(format_table(aggregate_records(records)), end="")


_DISPATCH = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "calibrate-threshold": _cmd_calibrate,
    "separate": _cmd_separate,
    "count": _cmd_count,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        config = ExperimentConfig.load(args.config, extra)
        _DISPATCH[args.command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
