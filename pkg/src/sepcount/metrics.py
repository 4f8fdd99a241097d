"""Separation and counting metrics: SDR, SDRi, SI-SDR, counting accuracy.

SDR here is the simplified single-source ratio 10*log10(||s||^2 /
||s - s_hat||^2) without the multi-tap projection of full BSS-Eval; SI-SDR is
reported alongside.  Both are capped at +/-300 dB so aggregates stay finite.
The assignment between references and estimates is recomputed here from the
metric itself and is independent of whatever permutation training used.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .signals import Waveform

SDR_CAP_DB = 300.0


def _vec(x) -> np.ndarray:
    arr = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("expected a non-empty 1-D signal")
    return arr.astype(np.float64)


def _cap(value_db: float) -> float:
    return float(np.clip(value_db, -SDR_CAP_DB, SDR_CAP_DB))


def si_sdr(s, s_hat) -> float:
    """Scale-invariant SDR in dB.

    Both signals are made zero-mean, the reference is rescaled by the optimal
    projection scalar alpha = <s_hat, s>/<s, s>, and the ratio of projected
    energy to residual energy is reported.  A zero residual caps at +300 dB;
    a vanishing projection (estimate orthogonal to the reference, or zero
    after mean removal) floors at -300 dB.
    """
    ref, est = _vec(s), _vec(s_hat)
    if ref.shape != est.shape:
        raise ValueError("signal length mismatch")
    ref = ref - ref.mean()
    est = est - est.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ValueError("zero reference signal")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    num = float(np.dot(target, target))
    den = float(np.sum((est - target) ** 2))
    if num == 0.0:
        return -SDR_CAP_DB
    if den == 0.0:
        return SDR_CAP_DB
    return _cap(10.0 * np.log10(num / den))


def sdr(s, s_hat) -> float:
    """Plain (scale-variant) SDR in dB: 10*log10(||s||^2 / ||s - s_hat||^2)."""
    ref, est = _vec(s), _vec(s_hat)
    if ref.shape != est.shape:
        raise ValueError("signal length mismatch")
    num = float(np.dot(ref, ref))
    if num == 0.0:
        raise ValueError("zero reference signal")
    den = float(np.sum((ref - est) ** 2))
    if den == 0.0:
        return SDR_CAP_DB
    return _cap(10.0 * np.log10(num / den))


def metric_assignment(sources: Sequence, estimates: Sequence) -> tuple[int | None, ...]:
    """SDR-optimal pairing of references to estimates.

    Returns one estimate index per source (None when there are fewer
    estimates than sources).  Found by exhaustive enumeration over injective
    maps; ties keep the lexicographically first candidate.
    """
    refs = [_vec(s) for s in sources]
    ests = [_vec(e) for e in estimates]
    k, n = len(refs), len(ests)
    if k == 0:
        raise ValueError("need at least one source")
    if n == 0:
        return (None,) * k

    def score(pairs: Sequence[tuple[int, int]]) -> float:
        return sum(sdr(refs[i], ests[j]) for i, j in pairs)

    best: tuple[int | None, ...] | None = None
    best_score = -np.inf
    if n >= k:
        for cand in itertools.permutations(range(n), k):
            sc = score(list(enumerate(cand)))
            if sc > best_score:
                best_score, best = sc, tuple(cand)
    else:
        # Fewer estimates than sources: choose which sources get matched.
        for cand in itertools.permutations(range(k), n):
            sc = score([(src, est) for est, src in enumerate(cand)])
            if sc > best_score:
                full: list[int | None] = [None] * k
                for est, src in enumerate(cand):
                    full[src] = est
                best_score, best = sc, tuple(full)
    assert best is not None
    return best


def sdri(sources: Sequence, estimates: Sequence, mixture,
         assignment: Sequence[int | None] | None = None) -> float:
    """Mean SDR improvement of assigned estimates over the raw mixture.

    sdri = mean_k [sdr(s_k, z_assign(k)) - sdr(s_k, x)] over matched pairs.
    """
    if assignment is None:
        assignment = metric_assignment(sources, estimates)
    pairs = [(i, j) for i, j in enumerate(assignment) if j is not None]
    if not pairs:
        raise ValueError("no assigned pairs to score")
    mix = _vec(mixture)
    total = 0.0
    for i, j in pairs:
        total += sdr(sources[i], estimates[j]) - sdr(sources[i], mix)
    return total / len(pairs)


@dataclass
class MetricRecord:
    """Per-example evaluation row."""

    id: str
    predicted_count: int
    true_count: int
    sdr_db: tuple[float, ...] = ()
    si_sdr_db: tuple[float, ...] = ()
    sdri_db: float | None = None
    cer: float | None = None
    wer: float | None = None
    extra_streams: int = 0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "predicted_count": self.predicted_count,
            "true_count": self.true_count,
            "sdr_db": list(self.sdr_db),
            "si_sdr_db": list(self.si_sdr_db),
            "sdri_db": self.sdri_db,
            "cer": self.cer,
            "wer": self.wer,
            "extra_streams": self.extra_streams,
        }


def counting_accuracy(records: Sequence) -> float:
    """Percentage of records whose predicted count equals the true count."""
    if len(records) == 0:
        raise ValueError("no records")
    hits = sum(1 for r in records if r.predicted_count == r.true_count)
    return 100.0 * hits / len(records)
