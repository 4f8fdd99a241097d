"""Signal-level training objectives.

Log-energy reconstruction losses (plain and one-plus variants), exhaustive
permutation-invariant loss, the one-and-rest extraction loss used by the
iterative separator, and the stop-flag cross entropy.  Everything is written
against torch tensors so the losses stay differentiable end to end; Waveform
and numpy inputs are accepted for convenience.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .signals import Waveform

# 10 * log10 of the residual energy is clamped here instead of running to
# negative infinity on exact reconstruction.
LOG_MSE_FLOOR_DB = -300.0
_FLOOR_ENERGY = 10.0 ** (LOG_MSE_FLOOR_DB / 10.0)

FLAG_EPS = 1e-7

# Exhaustive permutation search stays exact and affordable up to this count.
MAX_PERMUTATION_SOURCES = 6

LossFn = Callable[..., torch.Tensor]


def scalar(value) -> float:
    """Plain float from a tensor or number without detaching noise."""
    return value.item() if isinstance(value, torch.Tensor) else float(value)


@dataclass
class LossValue:
    """A loss together with the assignment that produced it.

    ``assignment`` is a permutation tuple (estimate index -> target index)
    for the permutation-invariant loss, or a single 0-based source index for
    the one-and-rest loss.
    """

    value: torch.Tensor
    assignment: tuple[int, ...] | int | None = None

    def item(self) -> float:
        return scalar(self.value)


def _as_signal(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        if x.dim() != 1:
            raise ValueError("expected a 1-D signal tensor")
        return x
    if isinstance(x, Waveform):
        return torch.as_tensor(x.samples, dtype=torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _pair(s, s_hat) -> tuple[torch.Tensor, torch.Tensor]:
    a, b = _as_signal(s), _as_signal(s_hat)
    if a.shape != b.shape:
        raise ValueError("signal length mismatch")
    return a, b


def t_lmse(s, s_hat) -> torch.Tensor:
    """Residual energy in dB: 10*log10(sum_t (s - s_hat)^2).

    Exact reconstruction would be -inf; the value is clamped at
    LOG_MSE_FLOOR_DB and the clamp is reported with a RuntimeWarning.
    """
    a, b = _pair(s, s_hat)
    e = torch.sum((a - b) ** 2)
    if e.item() < _FLOOR_ENERGY:
        warnings.warn(
            f"t_lmse: residual energy below floor, clamped at {LOG_MSE_FLOOR_DB} dB",
            RuntimeWarning, stacklevel=2)
    return 10.0 * torch.log10(torch.clamp(e, min=_FLOOR_ENERGY))


def t_l1pmse(s, s_hat) -> torch.Tensor:
    """10*log10(1 + sum_t (s - s_hat)^2); zero iff exact reconstruction.

    The +1 keeps silent targets well behaved, so this is the base loss of
    choice whenever a target may be all zeros.
    """
    a, b = _pair(s, s_hat)
    return 10.0 * torch.log10(1.0 + torch.sum((a - b) ** 2))


def pit_loss(targets: Sequence, estimates: Sequence,
             base: LossFn = t_l1pmse) -> LossValue:
    """Minimum over all target permutations of the mean pairwise base loss.

    Evaluated by exhaustive enumeration (count <= 6); ties break toward the
    lexicographically smallest permutation so results are deterministic.
    """
    k = len(targets)
    if len(estimates) != k:
        raise ValueError("target and estimate counts differ")
    if not 1 <= k <= MAX_PERMUTATION_SOURCES:
        raise ValueError(f"source count must be in 1..{MAX_PERMUTATION_SOURCES}")
    ts = [_as_signal(t) for t in targets]
    es = [_as_signal(e) for e in estimates]
    matrix = [[base(t, e) for e in es] for t in ts]
    best_val: torch.Tensor | None = None
    best_perm: tuple[int, ...] | None = None
    for perm in itertools.permutations(range(k)):
        val = sum(matrix[perm[i]][i] for i in range(k)) / k
        if best_val is None or val.item() < best_val.item():
            best_val, best_perm = val, perm
    assert best_val is not None and best_perm is not None
    return LossValue(best_val, best_perm)


def orpit_loss(sources: Sequence, z1, z2, base: LossFn = t_l1pmse) -> LossValue:
    """One-and-rest loss: min_k [base(s_k, z1) + base(sum_{i != k} s_i, z2)].

    The two terms are summed as-is, not averaged.  For a single source the
    rest-target is the zero signal, so ``base`` should be t_l1pmse (or accept
    the clamped floor of t_lmse).  Ties break toward the smallest k.
    """
    if len(sources) < 1:
        raise ValueError("need at least one source")
    z1_t, z2_t = _as_signal(z1), _as_signal(z2)
    srcs = [_as_signal(s) for s in sources]
    for s in srcs:
        if s.shape != z1_t.shape or s.shape != z2_t.shape:
            raise ValueError("signal length mismatch")
    best_val: torch.Tensor | None = None
    best_k = 0
    for k, s_k in enumerate(srcs):
        rest = [s for i, s in enumerate(srcs) if i != k]
        rest_sum = torch.stack(rest).sum(dim=0) if rest else torch.zeros_like(z1_t)
        val = base(s_k, z1_t) + base(rest_sum, z2_t)
        if best_val is None or val.item() < best_val.item():
            best_val, best_k = val, k
    assert best_val is not None
    return LossValue(best_val, best_k)


def flag_bce(f: float, f_hat) -> torch.Tensor:
    """Binary cross entropy (nats) between a 0/1 stop target and a probability.

    The probability is clipped to [FLAG_EPS, 1 - FLAG_EPS] first.
    """
    target = float(f)
    if target not in (0.0, 1.0):
        raise ValueError("flag target must be 0 or 1")
    fh = f_hat if isinstance(f_hat, torch.Tensor) else torch.as_tensor(
        float(f_hat), dtype=torch.float64)
    fh = torch.clamp(fh, FLAG_EPS, 1.0 - FLAG_EPS)
    return -(target * torch.log(fh) + (1.0 - target) * torch.log1p(-fh))


def _pairwise_energy(targets: torch.Tensor, estimates: torch.Tensor) -> torch.Tensor:
    # (B, K, T) x (B, K, T) -> (B, K_target, K_estimate) residual energies
    diff = targets.unsqueeze(2) - estimates.unsqueeze(1)
    return torch.sum(diff**2, dim=-1)


def batched_pit(targets: torch.Tensor, estimates: torch.Tensor,
                one_plus: bool = True) -> tuple[torch.Tensor, list[tuple[int, ...]]]:
    """Permutation-invariant loss over a batch of equal-size problems.

    targets, estimates: (B, K, T).  Returns per-example losses (B,) and the
    chosen permutations.  Matches pit_loss example by example; it exists only
    so training steps can batch the pairwise-energy computation.
    """
    if targets.shape != estimates.shape or targets.dim() != 3:
        raise ValueError("expected matching (B, K, T) tensors")
    b, k, _ = targets.shape
    if not 1 <= k <= MAX_PERMUTATION_SOURCES:
        raise ValueError(f"source count must be in 1..{MAX_PERMUTATION_SOURCES}")
    energy = _pairwise_energy(targets, estimates)
    if one_plus:
        matrix = 10.0 * torch.log10(1.0 + energy)
    else:
        matrix = 10.0 * torch.log10(torch.clamp(energy, min=_FLOOR_ENERGY))
    perms = list(itertools.permutations(range(k)))
    cols = torch.arange(k)
    stacked = torch.stack(
        [matrix[:, torch.as_tensor(p), cols].mean(dim=-1) for p in perms])  # (P, B)
    idx = torch.argmin(stacked, dim=0)  # first minimum: lexicographic tie-break
    loss = stacked.gather(0, idx.unsqueeze(0)).squeeze(0)
    return loss, [perms[int(i)] for i in idx]
