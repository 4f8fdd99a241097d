"""Training loops: front-end pretraining and joint fine-tuning schemes.

Front-end-only steps batch the separator forward over fixed-length crops.
One-and-rest pretraining optionally mixes in feedback examples: the detached
residual of a forward pass becomes a new input whose targets are the
not-yet-extracted sources, which matches what the model sees at inference.

One run = one scheme.  Every step appends a JSON line
{"step", "fe_loss", "asr_loss", "flag_loss", "lr"} to the training log, dev
loss is evaluated periodically, and the best-dev checkpoint is retained next
to the last one.  A non-finite loss aborts the run after logging the
offending step.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .asr import AsrModel, load_asr, save_asr
from .config import ConfigError, ExperimentConfig
from .joint import (train_step_orpit_multi_iteration,
                    train_step_orpit_single_iteration, train_step_tasnet_joint)
from .losses import batched_pit, flag_bce, orpit_loss, scalar, t_l1pmse, t_lmse
from .separator import DprnnSeparator, load_separator, save_separator
from .signals import MixtureExample, Waveform, load_manifest

SCHEMES = ("tasnet_fixed", "orpit_single", "orpit_multi")
MODES = ("fe_only", "asr_only", "both")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, losses: dict):
        super().__init__(f"non-finite loss at step {step}: {losses}")
        self.step = step


@dataclass
class TrainingArtifacts:
    out_dir: Path
    log_path: Path
    last_checkpoint: Path
    best_checkpoint: Path
    asr_last: Path | None = None
    asr_best: Path | None = None
    final_losses: dict | None = None


def crop_example(example: MixtureExample, crop_len: int,
                 rng: np.random.Generator) -> MixtureExample:
    """Random fixed-length crop; mixture and sources share the window."""
    n = len(example.mixture)
    if n <= crop_len:
        return example
    off = int(rng.integers(0, n - crop_len + 1))
    rate = example.mixture.sample_rate
    return MixtureExample(
        mixture=Waveform(example.mixture.samples[off:off + crop_len], rate),
        sources=tuple(Waveform(s.samples[off:off + crop_len], rate)
                      for s in example.sources),
        transcripts=example.transcripts,
        overlap_mode=example.overlap_mode,
        gains_db=example.gains_db,
        sum_atol=example.sum_atol,
    )


def _stack_batch(batch: Sequence[MixtureExample], k_out: int,
                 dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """Equal-length batch -> mixture (B, T) and silence-padded targets (B, K, T)."""
    lengths = {len(ex.mixture) for ex in batch}
    if len(lengths) != 1:
        raise ValueError("batched training needs equal-length examples")
    xs = torch.stack([torch.as_tensor(ex.mixture.samples, dtype=dtype)
                      for ex in batch])
    t = xs.shape[1]
    targets = torch.zeros(len(batch), k_out, t, dtype=dtype)
    for i, ex in enumerate(batch):
        for j, src in enumerate(ex.sources):
            targets[i, j] = torch.as_tensor(src.samples, dtype=dtype)
    return xs, targets


def tasnet_fe_step(batch: Sequence[MixtureExample], fe: DprnnSeparator,
                   optimizer=None, one_plus: bool = True) -> dict:
    """Permutation-invariant reconstruction step for a fixed-output model."""
    dtype = next(fe.parameters()).dtype
    k_out = fe.num_outputs
    for ex in batch:
        if ex.num_sources > k_out:
            raise ValueError("more sources than model outputs")
    xs, targets = _stack_batch(batch, k_out, dtype)
    streams, _ = fe(xs)
    losses, _ = batched_pit(targets, streams, one_plus=one_plus)
    loss = losses.mean()
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)
    return {"fe_loss": scalar(loss), "asr_loss": 0.0, "flag_loss": None}


def orpit_fe_step(batch: Sequence[MixtureExample], fe: DprnnSeparator,
                  optimizer=None, base=t_l1pmse, feedback_ratio: float = 0.0,
                  rng: np.random.Generator | None = None) -> dict:
    """One-and-rest pretraining step with optional feedback examples.

    With probability ``feedback_ratio`` an example with at least two sources
    is replaced by its own detached residual: one forward pass extracts a
    source, and the new input/targets are the residual and the remaining
    sources.  The stop-flag target is 1 exactly when one source remains.
    """
    dtype = next(fe.parameters()).dtype
    items: list[tuple[torch.Tensor, list[torch.Tensor]]] = []
    for ex in batch:
        x = torch.as_tensor(ex.mixture.samples, dtype=dtype)
        srcs = [torch.as_tensor(s.samples, dtype=dtype) for s in ex.sources]
        derive = (feedback_ratio > 0 and rng is not None and len(srcs) >= 2
                  and rng.random() < feedback_ratio)
        if derive:
            with torch.no_grad():
                streams, _ = fe(x.unsqueeze(0))
                lv = orpit_loss(srcs, streams[0, 0], streams[0, 1], base)
            assert isinstance(lv.assignment, int)
            rest = [s for i, s in enumerate(srcs) if i != lv.assignment]
            items.append((streams[0, 1].detach(), rest))
        else:
            items.append((x, srcs))

    xs = torch.stack([x for x, _ in items])
    streams, flags = fe(xs)
    sig_terms = []
    flag_terms = []
    for i, (_, srcs) in enumerate(items):
        lv = orpit_loss(srcs, streams[i, 0], streams[i, 1], base)
        sig_terms.append(lv.value)
        if flags is not None:
            flag_terms.append(flag_bce(1.0 if len(srcs) == 1 else 0.0, flags[i]))
    sig = torch.stack(sig_terms).mean()
    flag = torch.stack(flag_terms).mean() if flag_terms else None
    loss = sig + flag if flag is not None else sig
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        optimizer.zero_grad(set_to_none=True)
    return {"fe_loss": scalar(sig), "asr_loss": 0.0,
            "flag_loss": scalar(flag) if flag is not None else None}


def _pick_base(config: ExperimentConfig, batch_has_silence: bool):
    name = config.choice("train.base_loss", ("auto", "t_lmse", "t_l1pmse"))
    if name == "t_lmse":
        return t_lmse, False
    if name == "t_l1pmse":
        return t_l1pmse, True
    if batch_has_silence:
        return t_l1pmse, True
    return t_lmse, False


def _run_step(config: ExperimentConfig, scheme: str, mode: str,
              batch: Sequence[MixtureExample], fe, asr, fe_opt, asr_opt,
              rng: np.random.Generator) -> dict:
    if scheme == "tasnet_fixed":
        silence_possible = any(ex.num_sources < fe.num_outputs for ex in batch)
    else:
        # one-and-rest residual targets go silent on the last source, both
        # for single-talker inputs and for feedback-derived ones
        silence_possible = any(ex.num_sources == 1 for ex in batch) or \
            config["train.feedback_ratio"] > 0 or scheme == "orpit_multi"
    base, one_plus = _pick_base(config, silence_possible)
    fe_weight = config["train.fe_weight"]
    if mode == "fe_only":
        if scheme == "tasnet_fixed":
            return tasnet_fe_step(batch, fe, fe_opt, one_plus=one_plus)
        return orpit_fe_step(batch, fe, fe_opt, base=base,
                             feedback_ratio=config["train.feedback_ratio"], rng=rng)
    tune = "asr" if mode == "asr_only" else "fe_and_asr"
    if scheme == "tasnet_fixed":
        result = train_step_tasnet_joint(batch, fe, asr, mode, fe_opt, asr_opt,
                                         base=base, fe_weight=fe_weight)
    elif scheme == "orpit_single":
        result = train_step_orpit_single_iteration(batch, fe, asr, tune, fe_opt,
                                                   asr_opt, base=base,
                                                   fe_weight=fe_weight)
    else:
        result = train_step_orpit_multi_iteration(batch, fe, asr, tune, fe_opt,
                                                  asr_opt, base=base,
                                                  fe_weight=fe_weight)
    return {"fe_loss": result.fe_loss, "asr_loss": result.asr_loss,
            "flag_loss": result.flag_loss}


def _dev_loss(config: ExperimentConfig, scheme: str, mode: str,
              examples: Sequence[MixtureExample], fe, asr) -> float:
    # raw examples only: no feedback substitution, and a throwaway rng so dev
    # evaluation never perturbs the training randomness
    dev_config = ExperimentConfig(dict(config.values))
    dev_config.values["train.feedback_ratio"] = 0.0
    rng = np.random.default_rng(0)
    total = 0.0
    with torch.no_grad():
        for ex in examples:
            losses = _run_step(dev_config, scheme, mode, [ex], fe, asr,
                               None, None, rng)
            total += losses["fe_loss"] + losses["asr_loss"] + \
                (losses["flag_loss"] or 0.0)
    return total / len(examples)


def run_training(config: ExperimentConfig) -> TrainingArtifacts:
    """Execute the configured training scheme; see the module docstring."""
    scheme = config.choice("train.scheme", SCHEMES)
    mode = config.choice("train.mode", MODES)
    torch.set_num_threads(max(1, config["train.threads"]))
    seed = config["train.seed"]
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    try:
        manifest = load_manifest(config.require("train.manifest"))
        dev_examples: list[MixtureExample] = []
        if config["train.dev_manifest"]:
            dev_examples = load_manifest(config["train.dev_manifest"]).load_examples()
        fe = (load_separator(config["train.fe_checkpoint"])
              if config["train.fe_checkpoint"]
              else DprnnSeparator(config.separator_config()))
    except (ValueError, FileNotFoundError) as exc:
        raise ConfigError(str(exc)) from exc
    examples = manifest.load_examples()
    if not examples:
        raise ConfigError("training manifest has no entries")
    if scheme in ("orpit_single", "orpit_multi") and fe.num_outputs != 2:
        raise ConfigError("one-and-rest schemes need separator.outputs=2")

    asr = None
    asr_opt = None
    if mode != "fe_only":
        if config["train.asr_checkpoint"]:
            asr = load_asr(config["train.asr_checkpoint"])
        else:
            asr = AsrModel(config.asr_config(),
                           sample_rate=config["dataset.sample_rate"])
        asr_opt = torch.optim.Adam(asr.parameters(), lr=config["train.lr"])
    fe_opt = torch.optim.Adam(fe.parameters(), lr=config["train.lr"])

    out_dir = Path(config.require("train.out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    last_path = out_dir / "last.pt"
    best_path = out_dir / "best.pt"
    asr_last = out_dir / "asr_last.pt" if asr is not None else None
    asr_best = out_dir / "asr_best.pt" if asr is not None else None

    steps = config["train.steps"]
    batch_size = config["train.batch"]
    crop_len = int(config["train.crop_s"] * config["dataset.sample_rate"])
    dev_every = config["train.dev_every"]
    best_dev = math.inf
    best_saved = False
    losses: dict = {}

    with log_path.open("w") as log:
        for step in range(1, steps + 1):
            idx = rng.choice(len(examples), size=batch_size,
                             replace=len(examples) < batch_size)
            if mode == "fe_only" and crop_len > 0:
                batch = [crop_example(examples[i], crop_len, rng) for i in idx]
            else:
                batch = [examples[i] for i in idx]
            losses = _run_step(config, scheme, mode, batch, fe, asr,
                               fe_opt, asr_opt, rng)
            record = {"step": step, "fe_loss": losses["fe_loss"],
                      "asr_loss": losses["asr_loss"],
                      "flag_loss": losses["flag_loss"], "lr": config["train.lr"]}
            log.write(json.dumps(record) + "\n")
            finite = all(v is None or math.isfinite(v) for v in losses.values())
            if not finite:
                log.flush()
                raise TrainingDiverged(step, losses)
            if dev_examples and dev_every > 0 and step % dev_every == 0:
                dev = _dev_loss(config, scheme, mode, dev_examples, fe, asr)
                if dev < best_dev:
                    best_dev = dev
                    save_separator(best_path, fe)
                    if asr is not None and asr_best is not None:
                        save_asr(asr_best, asr)
                    best_saved = True

    save_separator(last_path, fe)
    if asr is not None and asr_last is not None:
        save_asr(asr_last, asr)
    if not best_saved:
        save_separator(best_path, fe)
        if asr is not None and asr_best is not None:
            save_asr(asr_best, asr)

    return TrainingArtifacts(
        out_dir=out_dir, log_path=log_path, last_checkpoint=last_path,
        best_checkpoint=best_path, asr_last=asr_last, asr_best=asr_best,
        final_losses=losses or None,
    )
