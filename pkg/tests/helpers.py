"""Shared test utilities: independent numpy oracles, finite-difference
gradient checks, an oracle peeling separator, and small synthetic fixtures.

The oracles are deliberately written against numpy alone so they share no
code path with the package implementations they verify.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
import torch

from sepcount.signals import (MixtureExample, SPEAKER_BANDS, Waveform,
                              make_mixture, synth_source)
from sepcount.separator import SeparatorOutput


def np_l1pmse(s, s_hat) -> float:
    return 10.0 * np.log10(1.0 + np.sum((np.asarray(s) - np.asarray(s_hat)) ** 2))


def np_lmse(s, s_hat, floor_db: float = -300.0) -> float:
    e = np.sum((np.asarray(s) - np.asarray(s_hat)) ** 2)
    return 10.0 * np.log10(max(e, 10.0 ** (floor_db / 10.0)))


def brute_force_pit(targets, estimates, base=np_l1pmse):
    """Exhaustive permutation search, numpy only."""
    k = len(targets)
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(k)):
        val = sum(base(targets[perm[i]], estimates[i]) for i in range(k)) / k
        if val < best:
            best, best_perm = val, perm
    return best, best_perm


def brute_force_orpit(sources, z1, z2, base=np_l1pmse):
    """Exhaustive one-vs-rest search, numpy only."""
    best, best_k = math.inf, None
    for k in range(len(sources)):
        rest = np.sum([s for i, s in enumerate(sources) if i != k], axis=0) \
            if len(sources) > 1 else np.zeros_like(sources[0])
        val = base(sources[k], z1) + base(rest, z2)
        if val < best:
            best, best_k = val, k
    return best, best_k


def brute_force_ctc_likelihood(probs: np.ndarray, targets: list[int],
                               blank: int = 0) -> float:
    """Sum path probabilities over every frame labeling that collapses to the
    target sequence (remove repeats, then drop blanks)."""
    t, a = probs.shape
    total = 0.0
    for path in itertools.product(range(a), repeat=t):
        collapsed = []
        prev = None
        for sym in path:
            if sym != prev:
                collapsed.append(sym)
            prev = sym
        collapsed = [s for s in collapsed if s != blank]
        if collapsed == list(targets):
            p = 1.0
            for frame, sym in enumerate(path):
                p *= probs[frame, sym]
            total += p
    return total


def fd_gradient(f, tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of scalar f() w.r.t. every entry of tensor.

    The tensor is mutated in place and restored; f must re-run the full
    computation each call.
    """
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        f_plus = float(f())
        flat[i] = orig - h
        f_minus = float(f())
        flat[i] = orig
        grad.view(-1)[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def rel_grad_err(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Infinity-norm relative disagreement between two gradients."""
    diff = float((analytic - numeric).abs().max())
    scale = max(float(analytic.abs().max()), float(numeric.abs().max()), 1e-8)
    return diff / scale


def check_gradients(build_loss, params: list[torch.Tensor], h: float = 1e-5,
                    tol: float = 1e-4) -> float:
    """Verify autograd against central differences for every parameter tensor.

    build_loss() must rebuild the scalar loss from scratch.  Returns the worst
    relative error seen.
    """
    loss = build_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for param, grad in zip(params, grads):
        analytic = torch.zeros_like(param) if grad is None else grad
        numeric = fd_gradient(lambda: build_loss().item(), param, h=h)
        err = rel_grad_err(analytic, numeric)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.2e} on shape {tuple(param.shape)}"
    return worst


class OraclePeelSeparator:
    """Stub two-output model that peels known sources in a fixed order.

    Given any suffix-sum of an example's sources as input, it returns the
    next source on the primary output and the remaining sum on the secondary
    output, mimicking a perfect iterative extractor.  The stop flag reports
    0.99 when the input holds a single source, else 0.01.
    """

    def __init__(self, examples: list[MixtureExample], atol: float = 1e-6):
        self.atol = atol
        self._table: list[tuple[np.ndarray, np.ndarray, np.ndarray, bool]] = []
        for ex in examples:
            srcs = [s.samples for s in ex.sources]
            rate = ex.mixture.sample_rate
            self._rate = rate
            for j in range(len(srcs)):
                suffix = np.sum(np.stack(srcs[j:]), axis=0)
                rest = (np.sum(np.stack(srcs[j + 1:]), axis=0)
                        if j + 1 < len(srcs) else np.zeros_like(suffix))
                self._table.append((suffix, srcs[j], rest, j == len(srcs) - 1))

    @property
    def num_outputs(self) -> int:
        return 2

    def separate(self, wav: Waveform) -> SeparatorOutput:
        if float(np.max(np.abs(wav.samples))) <= self.atol:
            silent = Waveform(np.zeros(len(wav)), wav.sample_rate)
            return SeparatorOutput(streams=[silent, silent], stop_flag_prob=0.99)
        best = None
        best_err = np.inf
        for suffix, src, rest, is_last in self._table:
            if suffix.size != len(wav):
                continue
            err = float(np.max(np.abs(suffix - wav.samples)))
            if err < best_err:
                best_err = err
                best = (src, rest, is_last)
        if best is None or best_err > self.atol:
            raise AssertionError(f"oracle stub got an unknown input (err={best_err})")
        src, rest, is_last = best
        return SeparatorOutput(
            streams=[Waveform(src, wav.sample_rate),
                     Waveform(rest if np.any(rest) else np.zeros_like(rest),
                              wav.sample_rate)],
            stop_flag_prob=0.99 if is_last else 0.01,
        )


def distinct_band_seeds(k: int, rng: np.random.Generator) -> list[int]:
    bands = rng.permutation(len(SPEAKER_BANDS))[:k]
    return [int(b + len(SPEAKER_BANDS) * rng.integers(1, 1000)) for b in bands]


def toy_example(k: int, seed: int = 0, kind: str = "band_noise",
                mode: str = "min", duration_s: float = 0.25,
                sample_rate: int = 8000) -> MixtureExample:
    """A small mixture with one source per (distinct) speaker band."""
    rng = np.random.default_rng(seed)
    seeds = distinct_band_seeds(k, rng)
    if kind == "syllabic":
        texts = ["".join("abcdefghij"[i] for i in rng.integers(0, 10, size=3))
                 for _ in range(k)]
        sources = [synth_source(kind, token_seq=t, seed=s, sample_rate=sample_rate)
                   for t, s in zip(texts, seeds)]
        return make_mixture(sources, mode, seed=seed, transcripts=texts)
    sources = [synth_source(kind, duration_s=duration_s, seed=s,
                            sample_rate=sample_rate) for s in seeds]
    return make_mixture(sources, mode, seed=seed)
