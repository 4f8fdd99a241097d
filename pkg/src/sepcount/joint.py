"""Joint fine-tuning of the separation front-end and the recognizer.

The combined objective is the plain sum of the recognizer loss and the
front-end signal loss (an optional front-end weight is exposed for
experimentation, default 1).  The permutation between estimated streams and
reference transcripts is always resolved with the signal-level loss alone;
the recognizer loss never influences the pairing.

Three step flavors are provided:
  * fixed-output separator + recognizer, with silence targets padding the
    outputs when a mixture has fewer talkers than the model has streams;
  * single-iteration one-and-rest fine-tuning (one pass on the raw mixture,
    recognizer trained on the primary output only);
  * multi-iteration fine-tuning, which unrolls exactly the true number of
    iterations, feeds the residual forward with gradients attached, trains
    the recognizer on every primary output, and sets the stop-flag target
    only on the last iteration.

Each step performs the backward pass and updates only the optimizers its
mode permits; excluded parameters are left untouched.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .asr import AsrModel, asr_loss, stft_features
from .losses import (LossFn, flag_bce, orpit_loss, pit_loss, scalar,
                     t_l1pmse)
from .separator import DprnnSeparator
from .signals import MixtureExample, Waveform

TASNET_MODES = ("fe_only", "asr_only", "both")
ORPIT_TUNE = ("asr", "fe_and_asr")
MAX_UNROLL = 6


@dataclass
class JointBatchResult:
    """Losses of one joint step.

    ``total_loss`` equals ``mean(asr_losses) + fe_weight * (fe_loss +
    flag_loss)`` recombined from the reported floats, so the additivity holds
    exactly (empty parts contribute 0).  ``assignments`` holds the
    signal-loss pairing per example.
    """

    total_loss: float
    fe_loss: float
    asr_losses: list[float]
    flag_loss: float | None
    assignments: list

    @property
    def asr_loss(self) -> float:
        return sum(self.asr_losses) / len(self.asr_losses) if self.asr_losses else 0.0


def joint_loss(asr_loss_sum, fe_loss, fe_weight: float = 1.0):
    """Combined objective: recognizer loss plus (weighted) front-end loss."""
    total = asr_loss_sum + fe_weight * fe_loss
    if not math.isfinite(scalar(total)):
        raise ValueError("non-finite joint loss")
    return total


def resolve_permutation_by_fe(targets: Sequence, estimates: Sequence,
                              base: LossFn = t_l1pmse) -> tuple[int, ...]:
    """Signal-loss-optimal pairing (estimate index -> target index).

    The recognizer pairs transcript ``assignment[k]`` with stream ``k``; the
    recognizer loss plays no role in choosing the assignment.
    """
    result = pit_loss(targets, estimates, base)
    assert isinstance(result.assignment, tuple)
    return result.assignment


def vad_gate(streams: Sequence[Waveform], mixture: Waveform,
             rel_threshold_db: float = 30.0) -> list[Waveform]:
    """Drop streams at or below ``rel_threshold_db`` under the mixture power.

    Survivors keep their order; an all-silent input yields an empty list.
    """
    if len(streams) == 0:
        raise ValueError("need at least one stream")
    floor = mixture.mean_power() * 10.0 ** (-rel_threshold_db / 10.0)
    return [s for s in streams if s.mean_power() > floor]


def _grad_ctx(enabled: bool):
    return contextlib.nullcontext() if enabled else torch.no_grad()


def _signal_tensors(example: MixtureExample, dtype) -> tuple[torch.Tensor, list[torch.Tensor]]:
    x = torch.as_tensor(example.mixture.samples, dtype=dtype)
    srcs = [torch.as_tensor(s.samples, dtype=dtype) for s in example.sources]
    return x, srcs


def _recognize_for_loss(asr: AsrModel, stream: torch.Tensor, transcript: str,
                        sample_rate: int) -> torch.Tensor:
    feats = stft_features(stream, asr.config, sample_rate=sample_rate)
    out = asr(feats, reference=transcript)
    return asr_loss(out, transcript, lam=asr.config.ctc_weight, vocab=asr.vocab)


def _apply_updates(grad_target: torch.Tensor | None,
                   optimizers: list[torch.optim.Optimizer | None]) -> None:
    live = [opt for opt in optimizers if opt is not None]
    if grad_target is None or not live:
        return
    for opt in live:
        opt.zero_grad(set_to_none=True)
    if grad_target.requires_grad:
        grad_target.backward()
        for opt in live:
            opt.step()
    for opt in live:
        opt.zero_grad(set_to_none=True)


def train_step_tasnet_joint(batch: Sequence[MixtureExample], fe: DprnnSeparator,
                            asr: AsrModel | None, mode: str,
                            fe_optimizer=None, asr_optimizer=None,
                            base: LossFn = t_l1pmse,
                            fe_weight: float = 1.0) -> JointBatchResult:
    """One joint step for a fixed-output separator.

    Mixtures with fewer talkers than output streams get silence targets (the
    one-plus loss keeps those finite).  ``mode`` controls which parameter set
    the step updates; the other model's parameters stay bitwise unchanged.
    """
    if mode not in TASNET_MODES:
        raise ValueError(f"unknown mode: {mode!r}")
    if not batch:
        raise ValueError("empty batch")
    if mode != "fe_only" and asr is None:
        raise ValueError("recognizer required unless mode is fe_only")
    dtype = next(fe.parameters()).dtype
    k_out = fe.num_outputs
    fe_grad = mode in ("fe_only", "both")
    asr_grad = mode in ("asr_only", "both")

    fe_terms: list[torch.Tensor] = []
    asr_terms: list[torch.Tensor] = []
    assignments: list[tuple[int, ...]] = []
    for ex in batch:
        if ex.num_sources > k_out:
            raise ValueError(
                f"example has {ex.num_sources} sources but the model has {k_out} outputs")
        x, srcs = _signal_tensors(ex, dtype)
        with _grad_ctx(fe_grad):
            streams, _ = fe(x.unsqueeze(0))
        streams = streams[0]
        targets = srcs + [torch.zeros_like(x)] * (k_out - len(srcs))
        lv = pit_loss(targets, list(streams), base)
        fe_terms.append(lv.value)
        assert isinstance(lv.assignment, tuple)
        assignments.append(lv.assignment)
        if asr is None:
            continue
        for k, target_idx in enumerate(lv.assignment):
            if target_idx < ex.num_sources and ex.transcripts[target_idx]:
                with _grad_ctx(asr_grad):
                    asr_terms.append(_recognize_for_loss(
                        asr, streams[k], ex.transcripts[target_idx],
                        ex.mixture.sample_rate))

    fe_mean = torch.stack(fe_terms).mean()
    asr_mean = torch.stack(asr_terms).mean() if asr_terms else None
    total = (asr_mean if asr_mean is not None else 0.0) + fe_weight * fe_mean

    if mode == "fe_only":
        grad_target, opts = fe_weight * fe_mean, [fe_optimizer]
    elif mode == "asr_only":
        grad_target, opts = asr_mean, [asr_optimizer]
    else:
        grad_target, opts = total, [fe_optimizer, asr_optimizer]
    _apply_updates(grad_target if isinstance(grad_target, torch.Tensor) else None, opts)

    # reported floats are recombined in python so the additivity contract
    # holds exactly, independent of tensor precision
    asr_floats = [scalar(t) for t in asr_terms]
    asr_mean_float = sum(asr_floats) / len(asr_floats) if asr_floats else 0.0
    return JointBatchResult(
        total_loss=joint_loss(asr_mean_float, scalar(fe_mean), fe_weight),
        fe_loss=scalar(fe_mean),
        asr_losses=asr_floats,
        flag_loss=None,
        assignments=assignments,
    )


def train_step_orpit_single_iteration(batch: Sequence[MixtureExample],
                                      fe: DprnnSeparator, asr: AsrModel,
                                      tune: str, fe_optimizer=None,
                                      asr_optimizer=None,
                                      base: LossFn = t_l1pmse,
                                      fe_weight: float = 1.0) -> JointBatchResult:
    """Unroll a single extraction on the raw mixture.

    The recognizer trains on the primary output against the transcript the
    signal loss selects; the residual output contributes only its signal
    term.  ``tune="asr"`` freezes the front-end entirely.
    """
    if tune not in ORPIT_TUNE:
        raise ValueError(f"unknown tune setting: {tune!r}")
    if not batch:
        raise ValueError("empty batch")
    if fe.num_outputs != 2:
        raise ValueError("one-and-rest training needs a two-output separator")
    dtype = next(fe.parameters()).dtype
    fe_grad = tune == "fe_and_asr"

    sig_terms: list[torch.Tensor] = []
    flag_terms: list[torch.Tensor] = []
    asr_terms: list[torch.Tensor] = []
    assignments: list[int] = []
    for ex in batch:
        x, srcs = _signal_tensors(ex, dtype)
        with _grad_ctx(fe_grad):
            streams, flag = fe(x.unsqueeze(0))
        z1, z2 = streams[0, 0], streams[0, 1]
        lv = orpit_loss(srcs, z1, z2, base)
        sig_terms.append(lv.value)
        assert isinstance(lv.assignment, int)
        assignments.append(lv.assignment)
        if flag is not None:
            with _grad_ctx(fe_grad):
                flag_terms.append(flag_bce(1.0 if ex.num_sources == 1 else 0.0,
                                           flag[0]))
        transcript = ex.transcripts[lv.assignment]
        if transcript:
            asr_terms.append(_recognize_for_loss(asr, z1, transcript,
                                                 ex.mixture.sample_rate))

    return _finish_orpit_step(sig_terms, flag_terms, asr_terms, assignments,
                              tune, fe_optimizer, asr_optimizer, fe_weight)


def unrolled_extraction(example: MixtureExample, fe: DprnnSeparator,
                        base: LossFn = t_l1pmse) -> list[dict]:
    """Unroll exactly num_sources iterations with gradients flowing through
    the fed-back residual.

    Iteration i matches the one-and-rest loss against the not-yet-assigned
    sources, removes the chosen source from the candidate set, and targets a
    stop flag of 1 only on the final iteration.  Returns one dict per
    iteration with z1, z2, flag_prob, chosen (original source index),
    signal (loss term tensor) and flag_target.
    """
    if fe.num_outputs != 2:
        raise ValueError("one-and-rest training needs a two-output separator")
    k_true = example.num_sources
    if k_true > MAX_UNROLL:
        raise ValueError(f"cannot unroll more than {MAX_UNROLL} iterations")
    dtype = next(fe.parameters()).dtype
    x, srcs = _signal_tensors(example, dtype)
    remaining = list(range(k_true))
    current = x
    iterations: list[dict] = []
    for i in range(1, k_true + 1):
        streams, flag = fe(current.unsqueeze(0))
        z1, z2 = streams[0, 0], streams[0, 1]
        lv = orpit_loss([srcs[j] for j in remaining], z1, z2, base)
        assert isinstance(lv.assignment, int)
        chosen = remaining[lv.assignment]
        remaining.remove(chosen)
        iterations.append({
            "z1": z1,
            "z2": z2,
            "flag_prob": flag[0] if flag is not None else None,
            "chosen": chosen,
            "signal": lv.value,
            "flag_target": 1.0 if i == k_true else 0.0,
        })
        current = z2
    return iterations


def train_step_orpit_multi_iteration(batch: Sequence[MixtureExample],
                                     fe: DprnnSeparator, asr: AsrModel,
                                     tune: str, fe_optimizer=None,
                                     asr_optimizer=None,
                                     base: LossFn = t_l1pmse,
                                     fe_weight: float = 1.0) -> JointBatchResult:
    """Multi-iteration fine-tuning: the residual of each pass is the next
    input and the recognizer trains on every primary output.

    Requires the true talker count per example (it fixes the unroll depth);
    count-driven stopping is inference-only.
    """
    if tune not in ORPIT_TUNE:
        raise ValueError(f"unknown tune setting: {tune!r}")
    if not batch:
        raise ValueError("empty batch")
    fe_grad = tune == "fe_and_asr"

    sig_terms: list[torch.Tensor] = []
    flag_terms: list[torch.Tensor] = []
    asr_terms: list[torch.Tensor] = []
    assignments: list[tuple[int, ...]] = []
    for ex in batch:
        with _grad_ctx(fe_grad):
            iterations = unrolled_extraction(ex, fe, base)
        assignments.append(tuple(it["chosen"] for it in iterations))
        for it in iterations:
            sig_terms.append(it["signal"])
            if it["flag_prob"] is not None:
                flag_terms.append(flag_bce(it["flag_target"], it["flag_prob"]))
            transcript = ex.transcripts[it["chosen"]]
            if transcript:
                asr_terms.append(_recognize_for_loss(asr, it["z1"], transcript,
                                                     ex.mixture.sample_rate))

    return _finish_orpit_step(sig_terms, flag_terms, asr_terms, assignments,
                              tune, fe_optimizer, asr_optimizer, fe_weight)


def _finish_orpit_step(sig_terms, flag_terms, asr_terms, assignments, tune,
                       fe_optimizer, asr_optimizer,
                       fe_weight: float) -> JointBatchResult:
    sig_mean = torch.stack(sig_terms).mean()
    flag_mean = torch.stack(flag_terms).mean() if flag_terms else None
    asr_mean = torch.stack(asr_terms).mean() if asr_terms else None
    fe_component = sig_mean + flag_mean if flag_mean is not None else sig_mean
    total = (asr_mean if asr_mean is not None else 0.0) + fe_weight * fe_component

    if tune == "asr":
        grad_target, opts = asr_mean, [asr_optimizer]
    else:
        grad_target, opts = total, [fe_optimizer, asr_optimizer]
    _apply_updates(grad_target if isinstance(grad_target, torch.Tensor) else None,
                   opts)

    asr_floats = [scalar(t) for t in asr_terms]
    asr_mean_float = sum(asr_floats) / len(asr_floats) if asr_floats else 0.0
    sig_float = scalar(sig_mean)
    flag_float = scalar(flag_mean) if flag_mean is not None else None
    fe_float = sig_float + flag_float if flag_float is not None else sig_float
    return JointBatchResult(
        total_loss=joint_loss(asr_mean_float, fe_float, fe_weight),
        fe_loss=sig_float,
        asr_losses=asr_floats,
        flag_loss=flag_float,
        assignments=assignments,
    )
