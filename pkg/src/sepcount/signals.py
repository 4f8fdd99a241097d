"""Synthetic sources, mixtures, WAV I/O, and dataset manifests.

All signals are mono float arrays with nominal range [-1, 1].  Synthetic
"speakers" occupy disjoint carrier bands so that a small masking network can
tell them apart; the band identity is derived from the generator seed
(``seed % len(SPEAKER_BANDS)``), which lets a dataset builder place every
source of a mixture in its own band.
"""
from __future__ import annotations

import json
import warnings
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

DEFAULT_SAMPLE_RATE = 8000

# Disjoint carrier bands, one per synthetic speaker identity.  The 250 Hz
# guard gaps keep identities separable by a short learned filterbank.
SPEAKER_BANDS: tuple[tuple[float, float], ...] = (
    (250.0, 750.0),
    (1000.0, 1500.0),
    (1750.0, 2250.0),
    (2500.0, 3000.0),
)

TOKEN_ALPHABET = "abcdefghij"
TOKEN_DURATION_S = 0.08
SOURCE_KINDS = ("tone_burst", "band_noise", "syllabic")

# Per-source peak; leaves headroom so a 4-source mixture stays inside [-1, 1].
PEAK_AMPLITUDE = 0.2

OVERLAP_MODES = ("min", "max")

# max-mode onset offsets are drawn uniformly over this fraction of the
# longest source, which creates single-talker regions at the edges.
MAX_ONSET_FRACTION = 0.25


@dataclass(frozen=True)
class Waveform:
    """A mono signal: float64 samples at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate

    def energy(self) -> float:
        return float(np.sum(self.samples**2))

    def mean_power(self) -> float:
        return self.energy() / len(self)


def mean_power(x: "Waveform | np.ndarray") -> float:
    """Mean squared amplitude of a waveform or plain sample array."""
    if isinstance(x, Waveform):
        return x.mean_power()
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty signal")
    return float(np.mean(arr**2))


@dataclass(frozen=True)
class MixtureExample:
    """One mixture plus its aligned, gain-scaled reference sources.

    The stored sources are exactly the signals that sum to the mixture, so
    ``mixture.samples == sum(s.samples for s in sources)`` within ``sum_atol``
    (1e-6 for freshly synthesized examples; wider for examples round-tripped
    through 16-bit WAV files).
    """

    mixture: Waveform
    sources: tuple[Waveform, ...]
    transcripts: tuple[str, ...] = ()
    overlap_mode: str = "min"
    gains_db: tuple[float, ...] = ()
    sum_atol: float = 1e-6

    def __post_init__(self) -> None:
        sources = tuple(self.sources)
        if len(sources) < 1:
            raise ValueError("a mixture needs at least one source")
        for s in sources:
            if len(s) != len(self.mixture) or s.sample_rate != self.mixture.sample_rate:
                raise ValueError("sources must match the mixture in length and rate")
        if self.overlap_mode not in OVERLAP_MODES:
            raise ValueError(f"unknown overlap mode: {self.overlap_mode!r}")
        transcripts = tuple(self.transcripts) or ("",) * len(sources)
        gains = tuple(self.gains_db) or (0.0,) * len(sources)
        if len(transcripts) != len(sources) or len(gains) != len(sources):
            raise ValueError("transcripts and gains must have one entry per source")
        total = np.sum(np.stack([s.samples for s in sources]), axis=0)
        err = float(np.max(np.abs(self.mixture.samples - total)))
        if err > self.sum_atol:
            raise ValueError(f"mixture deviates from source sum by {err:.3g}")
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "transcripts", transcripts)
        object.__setattr__(self, "gains_db", gains)

    @property
    def num_sources(self) -> int:
        return len(self.sources)


def _band_for_seed(seed: int) -> tuple[float, float]:
    return SPEAKER_BANDS[seed % len(SPEAKER_BANDS)]


def _tone_burst(n: int, band: tuple[float, float], rng: np.random.Generator,
                sample_rate: int) -> np.ndarray:
    lo, hi = band
    width = hi - lo
    carrier = rng.uniform(lo + 0.1 * width, hi - 0.1 * width)
    burst_rate = rng.uniform(2.0, 5.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n) / sample_rate
    envelope = 0.5 - 0.5 * np.cos(2.0 * np.pi * burst_rate * t)
    return PEAK_AMPLITUDE * envelope * np.sin(2.0 * np.pi * carrier * t + phase)


def _band_noise(n: int, band: tuple[float, float], rng: np.random.Generator,
                sample_rate: int) -> np.ndarray:
    lo, hi = band
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    mask = (freqs >= lo) & (freqs <= hi)
    if not mask.any():
        # Signal too short to resolve the band; fall back to the nearest bin.
        mask[np.argmin(np.abs(freqs - 0.5 * (lo + hi)))] = True
    spectrum = np.zeros(freqs.size, dtype=np.complex128)
    m = int(mask.sum())
    spectrum[mask] = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    x = np.fft.irfft(spectrum, n)
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        return x
    return x * (PEAK_AMPLITUDE / peak)


def _syllabic(token_seq: str, band: tuple[float, float],
              sample_rate: int) -> np.ndarray:
    lo, hi = band
    width = hi - lo
    seg = int(round(TOKEN_DURATION_S * sample_rate))
    slots = len(TOKEN_ALPHABET)
    t = np.arange(seg) / sample_rate
    envelope = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(seg) / seg)
    pieces = []
    for ch in token_seq:
        if ch == " ":
            pieces.append(np.zeros(seg))
            continue
        if ch not in TOKEN_ALPHABET:
            raise ValueError(f"unknown token {ch!r}")
        idx = TOKEN_ALPHABET.index(ch)
        freq = lo + (idx + 0.5) * width / slots
        pieces.append(PEAK_AMPLITUDE * envelope * np.sin(2.0 * np.pi * freq * t))
    return np.concatenate(pieces)


def synth_source(kind: str, duration_s: float | None = None, token_seq: str = "",
                 seed: int = 0, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Generate one deterministic synthetic source.

    ``tone_burst`` and ``band_noise`` need ``duration_s``; ``syllabic`` needs a
    non-empty ``token_seq`` (one fixed-length tone segment per token, silence
    for spaces) and its length is ``len(token_seq)`` segments regardless of
    ``duration_s``.
    """
    if kind not in SOURCE_KINDS:
        raise ValueError(f"unknown source kind: {kind!r}")
    band = _band_for_seed(seed)
    rng = np.random.default_rng(seed)
    if kind == "syllabic":
        if not token_seq:
            raise ValueError("syllabic sources need a non-empty token sequence")
        return Waveform(_syllabic(token_seq, band, sample_rate), sample_rate)
    if duration_s is None or duration_s <= 0:
        raise ValueError("duration_s must be positive")
    n = int(round(duration_s * sample_rate))
    if kind == "tone_burst":
        return Waveform(_tone_burst(n, band, rng, sample_rate), sample_rate)
    return Waveform(_band_noise(n, band, rng, sample_rate), sample_rate)


def make_mixture(sources: Sequence[Waveform], mode: str,
                 gains_db: Sequence[float] | None = None, seed: int = 0,
                 transcripts: Sequence[str] | None = None) -> MixtureExample:
    """Mix sources into a single channel.

    mode="min" truncates every source to the shortest one before summing, so
    the result is fully overlapped.  mode="max" zero-pads every source to a
    common length, placing each at a seeded random onset; nothing is
    truncated.  The returned example stores the aligned, gain-scaled sources,
    which sum to the mixture exactly.
    """
    sources = list(sources)
    if not sources:
        raise ValueError("empty source list")
    rates = {s.sample_rate for s in sources}
    if len(rates) != 1:
        raise ValueError("mismatched sample rates")
    rate = rates.pop()
    k = len(sources)
    gains = tuple(gains_db) if gains_db is not None else (0.0,) * k
    if len(gains) != k:
        raise ValueError("gains list must match the source count")
    scales = [10.0 ** (g / 20.0) for g in gains]

    if mode == "min":
        length = min(len(s) for s in sources)
        aligned = [s.samples[:length] * c for s, c in zip(sources, scales)]
    elif mode == "max":
        rng = np.random.default_rng(seed)
        longest = max(len(s) for s in sources)
        max_offset = int(MAX_ONSET_FRACTION * longest)
        offsets = rng.integers(0, max_offset + 1, size=k)
        length = int(max(off + len(s) for off, s in zip(offsets, sources)))
        aligned = []
        for off, s, c in zip(offsets, sources, scales):
            buf = np.zeros(length)
            buf[off:off + len(s)] = s.samples * c
            aligned.append(buf)
    else:
        raise ValueError(f"unknown overlap mode: {mode!r}")

    mix = np.sum(np.stack(aligned), axis=0)
    return MixtureExample(
        mixture=Waveform(mix, rate),
        sources=tuple(Waveform(a, rate) for a in aligned),
        transcripts=tuple(transcripts) if transcripts is not None else ("",) * k,
        overlap_mode=mode,
        gains_db=gains,
    )


def write_wav(path: str | Path, wav: Waveform) -> None:
    """Write 16-bit PCM mono.  Samples outside [-1, 1] are clipped loudly."""
    x = wav.samples
    peak = float(np.max(np.abs(x)))
    if peak > 1.0:
        warnings.warn(f"clipping while writing {path}: peak {peak:.3f} > 1.0",
                      RuntimeWarning, stacklevel=2)
        x = np.clip(x, -1.0, 1.0)
    q = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(q.tobytes())


def read_wav(path: str | Path) -> Waveform:
    """Read 16-bit PCM mono; everything else is rejected."""
    try:
        fh = wave.open(str(path), "rb")
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"unreadable WAV file {path}: {exc}") from exc
    with fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: only mono WAV files are supported")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        nframes = fh.getnframes()
        if nframes == 0:
            raise ValueError(f"{path}: empty WAV file")
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(nframes), dtype="<i2")
    return Waveform(data.astype(np.float64) / 32767.0, rate)


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a synthetic mixture dataset."""

    counts_per_k: Mapping[int, int]
    output_dir: str | Path
    modes: tuple[str, ...] = ("min",)
    kinds: tuple[str, ...] = ("band_noise",)
    seed: int = 0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    duration_range_s: tuple[float, float] = (0.5, 0.8)
    tokens_range: tuple[int, int] = (3, 6)
    gain_jitter_db: float = 0.0

    def __post_init__(self) -> None:
        if not self.counts_per_k:
            raise ValueError("counts_per_k must not be empty")
        for k, n in self.counts_per_k.items():
            if k < 1 or n < 0:
                raise ValueError("source counts must be >= 1 with >= 0 examples")
        for m in self.modes:
            if m not in OVERLAP_MODES:
                raise ValueError(f"unknown overlap mode: {m!r}")
        for kind in self.kinds:
            if kind not in SOURCE_KINDS:
                raise ValueError(f"unknown source kind: {kind!r}")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    mix: str
    srcs: tuple[str, ...]
    texts: tuple[str, ...]
    k: int
    mode: str
    seed: int


@dataclass(frozen=True)
class DatasetManifest:
    """Parsed manifest; paths are stored relative to the manifest file."""

    path: Path
    entries: tuple[ManifestEntry, ...]

    @property
    def root(self) -> Path:
        return self.path.parent

    def load_example(self, entry: ManifestEntry) -> MixtureExample:
        mixture = read_wav(self.root / entry.mix)
        sources = [read_wav(self.root / p) for p in entry.srcs]
        # 16-bit quantization perturbs every stored signal by up to half an
        # LSB, so the sum identity holds only within (k + 1) * 0.5 / 32767.
        atol = 1e-6 + (entry.k + 1) * 0.5 / 32767.0
        return MixtureExample(
            mixture=mixture,
            sources=tuple(sources),
            transcripts=entry.texts,
            overlap_mode=entry.mode,
            gains_db=(0.0,) * entry.k,
            sum_atol=atol,
        )

    def load_examples(self) -> list[MixtureExample]:
        return [self.load_example(e) for e in self.entries]


def _entry_seed(root_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([root_seed, index]).generate_state(1)[0])


def _random_tokens(n: int, rng: np.random.Generator) -> str:
    chars = [TOKEN_ALPHABET[i] for i in rng.integers(0, len(TOKEN_ALPHABET), size=n)]
    if n >= 5:
        chars[int(rng.integers(2, n - 2))] = " "
    return "".join(chars)


def _make_entry(entry_seed: int, k: int, spec: DatasetSpec) -> MixtureExample:
    rng = np.random.default_rng(entry_seed)
    kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
    mode = spec.modes[int(rng.integers(len(spec.modes)))]
    n_bands = len(SPEAKER_BANDS)
    bands = list(rng.permutation(n_bands)[:k])
    while len(bands) < k:
        bands.append(int(rng.integers(n_bands)))
    src_seeds = [int(b + n_bands * rng.integers(1, 2**20)) for b in bands]

    texts: tuple[str, ...]
    if kind == "syllabic":
        lo, hi = spec.tokens_range
        shared = int(rng.integers(lo, hi + 1))
        counts = [shared if mode == "min" else int(rng.integers(lo, hi + 1))
                  for _ in range(k)]
        texts = tuple(_random_tokens(n, rng) for n in counts)
        sources = [synth_source(kind, token_seq=t, seed=s, sample_rate=spec.sample_rate)
                   for t, s in zip(texts, src_seeds)]
    else:
        lo_s, hi_s = spec.duration_range_s
        shared_d = float(rng.uniform(lo_s, hi_s))
        durations = [shared_d if mode == "min" else float(rng.uniform(lo_s, hi_s))
                     for _ in range(k)]
        texts = ("",) * k
        sources = [synth_source(kind, duration_s=d, seed=s, sample_rate=spec.sample_rate)
                   for d, s in zip(durations, src_seeds)]

    if spec.gain_jitter_db > 0:
        gains = [float(g) for g in
                 rng.uniform(-spec.gain_jitter_db, spec.gain_jitter_db, size=k)]
    else:
        gains = [0.0] * k
    mix_seed = int(rng.integers(2**31))
    return make_mixture(sources, mode, gains, seed=mix_seed, transcripts=texts)


def build_dataset(spec: DatasetSpec) -> DatasetManifest:
    """Synthesize mixtures, write WAVs and a JSONL manifest.

    Regenerating with the same spec reproduces every byte: per-entry seeds
    derive only from (spec.seed, entry index), so entries could also be
    generated in parallel.
    """
    out = Path(spec.output_dir)
    wav_dir = out / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    index = 0
    for k in sorted(spec.counts_per_k):
        for _ in range(spec.counts_per_k[k]):
            entry_id = f"ex{index:05d}"
            entry_seed = _entry_seed(spec.seed, index)
            example = _make_entry(entry_seed, k, spec)
            mix_rel = f"wav/{entry_id}_mix.wav"
            src_rels = [f"wav/{entry_id}_s{i}.wav" for i in range(k)]
            write_wav(out / mix_rel, example.mixture)
            for rel, src in zip(src_rels, example.sources):
                write_wav(out / rel, src)
            lines.append(json.dumps({
                "id": entry_id,
                "mix": mix_rel,
                "srcs": src_rels,
                "texts": list(example.transcripts),
                "k": k,
                "mode": example.overlap_mode,
                "seed": entry_seed,
            }))
            index += 1
    manifest_path = out / "manifest.jsonl"
    manifest_path.write_text("\n".join(lines) + "\n")
    return load_manifest(manifest_path)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a JSONL manifest, checking id uniqueness and file existence."""
    path = Path(path)
    if not path.exists():
        raise ValueError(f"manifest not found: {path}")
    entries = []
    seen: set[str] = set()
    root = path.parent
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        obj = json.loads(line)
        missing = {"id", "mix", "srcs", "texts", "k", "mode", "seed"} - obj.keys()
        if missing:
            raise ValueError(f"{path}:{ln}: missing fields {sorted(missing)}")
        if obj["id"] in seen:
            raise ValueError(f"{path}:{ln}: duplicate id {obj['id']!r}")
        seen.add(obj["id"])
        for rel in [obj["mix"], *obj["srcs"]]:
            if not (root / rel).exists():
                raise ValueError(f"{path}:{ln}: missing file {rel}")
        entries.append(ManifestEntry(
            id=obj["id"], mix=obj["mix"], srcs=tuple(obj["srcs"]),
            texts=tuple(obj["texts"]), k=int(obj["k"]), mode=obj["mode"],
            seed=int(obj["seed"]),
        ))
    return DatasetManifest(path=path, entries=tuple(entries))
