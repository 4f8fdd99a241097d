"""Evaluation pipeline: separate, count, gate, recognize, score, report.

For iterative models the extraction loop runs once to full depth per
example; the stop rule is then read off the recorded trace (the trajectory
does not depend on the rule), which yields the predicted count, while the
scored streams are either the first true-K (oracle count) or the first
predicted-count streams.  Fixed-output models count by the energy threshold
and keep the top-K-energy outputs under oracle counting.

Reports are reproducible byte for byte from (checkpoint, manifest, config):
evaluation runs single threaded in manifest order and writes no timestamps.
Aggregate error rates are per-example rates (edit distance over reference
length, summed within an example) averaged across examples of a group.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .asr import AsrModel, edit_distance, load_asr, stft_features
from .config import ConfigError, ExperimentConfig
from .counting import (CalibrationResult, StopRule, count_fixed_outputs,
                       count_from_evidence, extract_iteratively,
                       select_top_k_energy)
from .joint import vad_gate
from .metrics import MetricRecord, counting_accuracy, metric_assignment, sdr, sdri, si_sdr
from .separator import DprnnSeparator, load_separator
from .signals import MixtureExample, Waveform, load_manifest


@dataclass
class EvalReport:
    records: list[MetricRecord]
    hypotheses: list[dict]
    aggregates: dict
    table: str
    records_path: Path | None = None
    report_path: Path | None = None
    hyps_path: Path | None = None


def _recognize(asr: AsrModel, stream: Waveform, reference: str) -> str:
    cap = max(1, 2 * len(reference)) if reference else asr.config.max_decode_steps
    with torch.no_grad():
        feats = stft_features(
            torch.as_tensor(stream.samples, dtype=next(asr.parameters()).dtype),
            asr.config, sample_rate=stream.sample_rate)
        out = asr(feats, reference=None, max_steps=cap)
    return out.hypothesis


def _evaluate_example(example: MixtureExample, entry_id: str,
                      model: DprnnSeparator, asr: AsrModel | None,
                      rule: StopRule, iterative: bool, oracle_count: bool,
                      use_vad: bool, vad_threshold_db: float,
                      gamma: float) -> tuple[MetricRecord, list[dict]]:
    true_k = example.num_sources
    if iterative:
        trace = extract_iteratively(example.mixture, model, rule,
                                    force_count=rule.max_iterations)
        predicted = count_from_evidence(trace.evidence, rule)
        keep = min(true_k, rule.max_iterations) if oracle_count else predicted
        streams = trace.streams[:keep]
    else:
        out = model.separate(example.mixture)
        predicted = count_fixed_outputs(out.streams, gamma)
        if oracle_count:
            streams = select_top_k_energy(out.streams,
                                          min(true_k, len(out.streams)))
        else:
            streams = [s for s in out.streams if s.mean_power() >= gamma]
    if use_vad and streams:
        streams = vad_gate(streams, example.mixture, vad_threshold_db)

    assignment: tuple[int | None, ...]
    if streams:
        assignment = metric_assignment(example.sources, streams)
    else:
        assignment = (None,) * true_k
    pairs = [(i, j) for i, j in enumerate(assignment) if j is not None]
    sdr_vals = tuple(sdr(example.sources[i], streams[j]) for i, j in pairs)
    si_vals = tuple(si_sdr(example.sources[i], streams[j]) for i, j in pairs)
    sdri_val = sdri(example.sources, streams, example.mixture,
                    assignment) if pairs else None
    extra = len(streams) - len(pairs)

    cer = wer = None
    hyp_rows: list[dict] = []
    if asr is not None and any(example.transcripts):
        char_dist = char_len = word_dist = word_len = 0
        for i, ref in enumerate(example.transcripts):
            if not ref:
                continue
            j = assignment[i]
            hyp = _recognize(asr, streams[j], ref) if j is not None else ""
            cd = edit_distance(list(hyp), list(ref))
            wd = edit_distance(hyp.split(), ref.split())
            char_dist += cd
            char_len += len(ref)
            word_dist += wd
            word_len += len(ref.split())
            hyp_rows.append({
                "id": entry_id,
                "stream_index": j,
                "ref": ref,
                "hyp": hyp,
                "cer": cd / len(ref),
                "wer": wd / max(1, len(ref.split())),
            })
        if char_len:
            cer = char_dist / char_len
            wer = word_dist / word_len
    record = MetricRecord(
        id=entry_id, predicted_count=predicted, true_count=true_k,
        sdr_db=sdr_vals, si_sdr_db=si_vals, sdri_db=sdri_val,
        cer=cer, wer=wer, extra_streams=extra,
    )
    return record, hyp_rows


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def aggregate_records(records: Sequence[MetricRecord]) -> dict:
    """Group metrics by true talker count plus an overall column."""
    groups: dict[str, list[MetricRecord]] = {}
    for r in sorted(records, key=lambda r: r.true_count):
        groups.setdefault(f"K={r.true_count}", []).append(r)
    groups["all"] = list(records)
    out = {}
    for name, rows in groups.items():
        si_flat = [v for r in rows for v in r.si_sdr_db]
        out[name] = {
            "examples": len(rows),
            "counting_accuracy": counting_accuracy(rows),
            "sdri_db": _mean([r.sdri_db for r in rows if r.sdri_db is not None]),
            "si_sdr_db": _mean(si_flat),
            "cer": _mean([r.cer for r in rows if r.cer is not None]),
            "wer": _mean([r.wer for r in rows if r.wer is not None]),
            "extra_streams": sum(r.extra_streams for r in rows),
        }
    return out


def format_table(aggregates: dict) -> str:
    columns = list(aggregates.keys())
    metrics = [
        ("examples", "examples", "{:d}"),
        ("count acc %", "counting_accuracy", "{:.1f}"),
        ("SDRi dB", "sdri_db", "{:.2f}"),
        ("SI-SDR dB", "si_sdr_db", "{:.2f}"),
        ("CER %", "cer", "{:.1%}"),
        ("WER %", "wer", "{:.1%}"),
        ("extra streams", "extra_streams", "{:d}"),
    ]
    width = 10
    lines = [" " * 14 + "".join(f"{c:>{width}}" for c in columns)]
    for label, key, fmt in metrics:
        cells = []
        for c in columns:
            value = aggregates[c][key]
            if value is None:
                cells.append(f"{'-':>{width}}")
            elif key in ("cer", "wer"):
                cells.append(f"{100.0 * value:>{width}.2f}")
            else:
                cells.append(f"{fmt.format(value):>{width}}")
        lines.append(f"{label:<14}" + "".join(cells))
    return "\n".join(lines) + "\n"


def run_eval(config: ExperimentConfig) -> EvalReport:
    """Evaluate a checkpoint over a manifest; optionally write report files."""
    torch.set_num_threads(max(1, config["eval.threads"]))
    try:
        model = load_separator(config.require("eval.checkpoint"))
        asr = load_asr(config["eval.asr_checkpoint"]) \
            if config["eval.asr_checkpoint"] else None
        manifest = load_manifest(config.require("eval.manifest"))
    except (ValueError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from exc
    if not manifest.entries:
        raise ConfigError("evaluation manifest has no entries")

    mode = config.choice("eval.mode", ("auto", "fixed", "iterative"))
    iterative = model.num_outputs == 2 if mode == "auto" else mode == "iterative"
    if iterative and model.num_outputs != 2:
        raise ConfigError("iterative evaluation needs a two-output separator")
    if iterative and config["stop.kind"] == "flag" and not model.config.stop_flag:
        raise ConfigError("stop.kind=flag needs a separator with a stop-flag head")
    gamma = config["stop.gamma"]
    if config["eval.gamma_file"]:
        gamma = CalibrationResult.load(config["eval.gamma_file"]).gamma
    rule = config.stop_rule(gamma=gamma)

    records: list[MetricRecord] = []
    hyp_rows: list[dict] = []
    for entry in manifest.entries:
        example = manifest.load_example(entry)
        record, hyps = _evaluate_example(
            example, entry.id, model, asr, rule, iterative,
            oracle_count=config["eval.oracle_count"],
            use_vad=config["eval.vad"],
            vad_threshold_db=config["eval.vad_threshold_db"],
            gamma=gamma)
        records.append(record)
        hyp_rows.extend(hyps)

    aggregates = aggregate_records(records)
    report = EvalReport(records=records, hypotheses=hyp_rows,
                        aggregates=aggregates, table=format_table(aggregates))
    if config["eval.out"]:
        out_dir = Path(config["eval.out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        report.records_path = out_dir / "records.jsonl"
        report.records_path.write_text(
            "".join(json.dumps(r.to_dict()) + "\n" for r in records))
        report.report_path = out_dir / "report.txt"
        report.report_path.write_text(report.table)
        if hyp_rows:
            report.hyps_path = out_dir / "hyps.jsonl"
            report.hyps_path.write_text(
                "".join(json.dumps(h) + "\n" for h in hyp_rows))
    return report


def load_records(path: str | Path) -> list[MetricRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        records.append(MetricRecord(
            id=obj["id"], predicted_count=obj["predicted_count"],
            true_count=obj["true_count"], sdr_db=tuple(obj["sdr_db"]),
            si_sdr_db=tuple(obj["si_sdr_db"]), sdri_db=obj["sdri_db"],
            cer=obj["cer"], wer=obj["wer"], extra_streams=obj["extra_streams"]))
    return records
