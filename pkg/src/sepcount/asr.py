"""Small CTC/attention recognizer over differentiable STFT features.

The encoder is two strided conv layers followed by a two-layer bidirectional
LSTM with a linear projection; a linear CTC head emits frame posteriors and
an LSTM decoder with content-based additive attention emits step posteriors.
Training combines the two with a weight ``lambda`` on the CTC term:
``lambda * L_ctc + (1 - lambda) * L_att`` (attention cross entropy summed
over steps).  Decoding is greedy; a CTC best-path decoder is available as an
alternative.  A ``location_aware`` config flag is reserved for a
location-aware attention extension and currently rejected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .signals import DEFAULT_SAMPLE_RATE, TOKEN_ALPHABET, Waveform

LOG_FLOOR = 1e-10

# Large negative stand-in for log(0); keeps the CTC lattice free of real
# infinities so gradients stay finite even on unreachable cells.
NEG_INF = -1e30


class Vocabulary:
    """Closed token set: blank + sos + eos (+ space) + tokens."""

    def __init__(self, tokens: str = TOKEN_ALPHABET, include_space: bool = True):
        self.tokens = tokens
        self.include_space = include_space
        self.blank_id = 0
        self.sos_id = 1
        self.eos_id = 2
        specials = ["<blank>", "<sos>", "<eos>"]
        chars = ([" "] if include_space else []) + list(tokens)
        self.id_to_token = specials + chars
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.token_to_id[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character not in vocabulary: {exc.args[0]!r}") from exc

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (self.blank_id, self.sos_id, self.eos_id):
                continue
            out.append(self.id_to_token[i])
        return "".join(out)


DEFAULT_VOCAB = Vocabulary()


def _ceil_div(n: int, d: int) -> int:
    return -(-n // d)


@dataclass(frozen=True)
class AsrConfig:
    stft_window: int = 128
    stft_hop: int = 64
    num_features: int = 32  # mel bins; 0 keeps the raw magnitude bins
    conv_channels: int = 8
    encoder_hidden: int = 32
    decoder_hidden: int = 32
    attention_dim: int = 32
    ctc_weight: float = 0.2  # the multi-target lambda
    max_decode_steps: int = 60
    location_aware: bool = False

    def __post_init__(self) -> None:
        if self.stft_hop > self.stft_window:
            raise ValueError("hop must not exceed the window")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")
        if self.location_aware:
            raise NotImplementedError(
                "location-aware attention is reserved, not implemented")


@dataclass
class AsrOutput:
    """Frame-level CTC and step-level attention log posteriors plus a greedy
    hypothesis.  Rows are log-softmax normalized."""

    ctc_log_posteriors: torch.Tensor  # (frames, alphabet)
    attention_log_posteriors: torch.Tensor  # (steps, alphabet)
    hypothesis: str


@lru_cache(maxsize=8)
def _mel_matrix(num_filters: int, num_bins: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank (num_filters, num_bins)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    nyquist = sample_rate / 2.0
    points_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), num_filters + 2))
    bin_freqs = np.linspace(0.0, nyquist, num_bins)
    mat = np.zeros((num_filters, num_bins))
    for i in range(num_filters):
        left, center, right = points_hz[i], points_hz[i + 1], points_hz[i + 2]
        up = (bin_freqs - left) / max(center - left, 1e-12)
        down = (right - bin_freqs) / max(right - center, 1e-12)
        mat[i] = np.clip(np.minimum(up, down), 0.0, None)
    return mat


def stft_features(x, config: AsrConfig,
                  sample_rate: int = DEFAULT_SAMPLE_RATE) -> torch.Tensor:
    """Log-magnitude STFT features, optionally mel-compressed.

    Returns (frames, dim) with frames = (T - window)//hop + 1.  The log has a
    1e-10 floor inside, so silence maps to a constant log(1e-10).  The whole
    map is differentiable in the input samples.
    """
    if isinstance(x, Waveform):
        sample_rate = x.sample_rate
        x = torch.as_tensor(x.samples, dtype=torch.float64)
    elif not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if x.dim() != 1:
        raise ValueError("expected a 1-D signal")
    if x.shape[0] < config.stft_window:
        raise ValueError("input shorter than one analysis window")
    frames = x.unfold(0, config.stft_window, config.stft_hop)
    window = torch.hann_window(config.stft_window, periodic=True, dtype=x.dtype)
    mag = torch.abs(torch.fft.rfft(frames * window, dim=1))
    if config.num_features:
        mel = torch.as_tensor(
            _mel_matrix(config.num_features, mag.shape[1], sample_rate),
            dtype=x.dtype)
        mag = mag @ mel.T
    return torch.log(mag + LOG_FLOOR)


class AsrModel(nn.Module):
    def __init__(self, config: AsrConfig, vocab: Vocabulary = DEFAULT_VOCAB,
                 sample_rate: int = DEFAULT_SAMPLE_RATE):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.sample_rate = sample_rate
        bins = config.stft_window // 2 + 1
        feat_dim = config.num_features or bins
        c = config.conv_channels
        self.conv1 = nn.Conv2d(1, c, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, stride=2, padding=1)
        reduced = _ceil_div(_ceil_div(feat_dim, 2), 2)  # two stride-2 convs
        h = config.encoder_hidden
        self.enc_rnn = nn.LSTM(c * reduced, h, num_layers=2,
                               bidirectional=True, batch_first=True)
        self.enc_proj = nn.Linear(2 * h, h)
        a = vocab.size
        self.ctc_out = nn.Linear(h, a)
        d = config.decoder_hidden
        self.embed = nn.Embedding(a, d)
        self.att_enc = nn.Linear(h, config.attention_dim, bias=False)
        self.att_dec = nn.Linear(d, config.attention_dim)
        self.att_score = nn.Linear(config.attention_dim, 1, bias=False)
        self.dec_cell = nn.LSTMCell(d + h, d)
        self.dec_out = nn.Linear(d + h, a)

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        """(frames, dim) -> subsampled encoder states (frames', hidden)."""
        if features.dim() != 2 or features.shape[0] < 1:
            raise ValueError("empty features")
        x = features.to(next(self.parameters()).dtype)[None, None]
        x = torch.relu(self.conv1(x))
        x = torch.relu(self.conv2(x))
        x = x.permute(0, 2, 1, 3).reshape(1, x.shape[2], -1)
        h, _ = self.enc_rnn(x)
        return torch.tanh(self.enc_proj(h))[0]

    def _context(self, enc: torch.Tensor, enc_att: torch.Tensor,
                 state: torch.Tensor) -> torch.Tensor:
        scores = self.att_score(torch.tanh(enc_att + self.att_dec(state))).squeeze(-1)
        weights = torch.softmax(scores, dim=0)
        return weights @ enc

    def forward(self, features: torch.Tensor, reference: str | None = None,
                max_steps: int | None = None) -> AsrOutput:
        """Run the recognizer.

        With a reference the decoder is teacher-forced for len(reference) + 1
        steps (the final step predicts eos); without one it decodes greedily
        until eos or ``max_steps``.
        """
        enc = self.encode(features)
        ctc_log = torch.log_softmax(self.ctc_out(enc), dim=-1)
        enc_att = self.att_enc(enc)
        d = self.config.decoder_hidden
        h = enc.new_zeros(d)
        c = enc.new_zeros(d)
        rows = []
        if reference is not None:
            ids = self.vocab.encode(reference)
            inputs = [self.vocab.sos_id] + ids
            for tok in inputs:
                emb = self.embed(torch.tensor(tok))
                ctx = self._context(enc, enc_att, h)
                h, c = self.dec_cell(torch.cat([emb, ctx]), (h, c))
                rows.append(torch.log_softmax(
                    self.dec_out(torch.cat([h, ctx])), dim=-1))
        else:
            limit = max_steps if max_steps is not None else self.config.max_decode_steps
            prev = self.vocab.sos_id
            for _ in range(limit):
                emb = self.embed(torch.tensor(prev))
                ctx = self._context(enc, enc_att, h)
                h, c = self.dec_cell(torch.cat([emb, ctx]), (h, c))
                row = torch.log_softmax(self.dec_out(torch.cat([h, ctx])), dim=-1)
                rows.append(row)
                prev = int(torch.argmax(row))
                if prev == self.vocab.eos_id:
                    break
        att_log = torch.stack(rows)
        hyp_ids = []
        for row in att_log:
            tok = int(torch.argmax(row))
            if tok == self.vocab.eos_id:
                break
            hyp_ids.append(tok)
        return AsrOutput(ctc_log, att_log, self.vocab.decode(hyp_ids))


def ctc_forward_nll(log_probs: torch.Tensor, targets: list[int],
                    blank: int = 0) -> torch.Tensor:
    """Negative log likelihood of a label sequence under the CTC lattice.

    Standard forward recursion over the blank-interleaved label sequence in
    log space.  Raises when the sequence cannot fit in the available frames
    (len + number of adjacent repeats > frames) instead of returning inf.
    """
    if len(targets) == 0:
        raise ValueError("empty target sequence")
    t_frames = log_probs.shape[0]
    repeats = sum(1 for a, b in zip(targets, targets[1:]) if a == b)
    if t_frames < len(targets) + repeats:
        raise ValueError("reference longer than the CTC frames permit")
    labels = [blank]
    for y in targets:
        labels.extend([y, blank])
    ext = len(labels)
    label_idx = torch.tensor(labels)
    # Skip transition s-2 -> s is allowed only between distinct labels.
    skip = torch.zeros(ext, dtype=torch.bool)
    for s in range(3, ext, 2):
        skip[s] = labels[s] != labels[s - 2]

    neg = log_probs.new_full((1,), NEG_INF)
    alpha = log_probs.new_full((ext,), NEG_INF)
    alpha = torch.cat([log_probs[0, blank].reshape(1),
                       log_probs[0, targets[0]].reshape(1),
                       alpha[2:]])
    for t in range(1, t_frames):
        shift1 = torch.cat([neg, alpha[:-1]])
        shift2 = torch.cat([neg, neg, alpha[:-2]])
        shift2 = torch.where(skip, shift2, torch.full_like(shift2, NEG_INF))
        alpha = torch.logsumexp(torch.stack([alpha, shift1, shift2]), dim=0)
        alpha = alpha + log_probs[t, label_idx]
    return -torch.logaddexp(alpha[-1], alpha[-2])


def asr_loss(output: AsrOutput, reference: str, lam: float = 0.2,
             vocab: Vocabulary = DEFAULT_VOCAB) -> torch.Tensor:
    """Multi-target loss: lam * CTC + (1 - lam) * attention cross entropy.

    The attention term is the sum over teacher-forced steps of the negative
    log posterior of the next reference token (eos last).
    """
    if not reference:
        raise ValueError("empty reference")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    ids = vocab.encode(reference)
    ctc = ctc_forward_nll(output.ctc_log_posteriors, ids, blank=vocab.blank_id)
    steps = ids + [vocab.eos_id]
    att_rows = output.attention_log_posteriors
    if att_rows.shape[0] != len(steps):
        raise ValueError("attention posteriors were not teacher-forced on this "
                         "reference")
    att = -sum(att_rows[t, tok] for t, tok in enumerate(steps))
    return lam * ctc + (1.0 - lam) * att


def decode_greedy(output: AsrOutput, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    """Argmax over attention steps until eos."""
    ids = []
    for row in output.attention_log_posteriors:
        tok = int(torch.argmax(row))
        if tok == vocab.eos_id:
            break
        ids.append(tok)
    return vocab.decode(ids)


def ctc_best_path(output: AsrOutput, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    """Frame argmax, collapse repeats, drop blanks."""
    path = [int(torch.argmax(row)) for row in output.ctc_log_posteriors]
    collapsed = []
    prev = None
    for tok in path:
        if tok != prev:
            collapsed.append(tok)
        prev = tok
    return vocab.decode([t for t in collapsed if t != vocab.blank_id])


def edit_distance(hyp_tokens: list, ref_tokens: list) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    m, n = len(ref_tokens), len(hyp_tokens)
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            sub = prev[j - 1] + (ref_tokens[i - 1] != hyp_tokens[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[n]


def edit_distance_rate(hyp: str, ref: str, unit: str = "char") -> float:
    """Character or word error rate: edit distance / reference length."""
    if unit == "char":
        hyp_tokens, ref_tokens = list(hyp), list(ref)
    elif unit == "word":
        hyp_tokens, ref_tokens = hyp.split(), ref.split()
    else:
        raise ValueError(f"unknown unit: {unit!r}")
    if not ref_tokens:
        raise ValueError("empty reference")
    return edit_distance(hyp_tokens, ref_tokens) / len(ref_tokens)


ASR_CHECKPOINT_FORMAT = "sepcount.asr.v1"


def save_asr(path: str | Path, model: AsrModel) -> None:
    torch.save({
        "format": ASR_CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "vocab": {"tokens": model.vocab.tokens,
                  "include_space": model.vocab.include_space},
        "sample_rate": model.sample_rate,
        "state": model.state_dict(),
    }, str(path))


def load_asr(path: str | Path,
             expected_config: AsrConfig | None = None) -> AsrModel:
    blob = torch.load(str(path), map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != ASR_CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a recognizer checkpoint")
    config = AsrConfig(**blob["config"])
    if expected_config is not None and config != expected_config:
        raise ValueError(
            f"checkpoint config {config} does not match expected {expected_config}")
    vocab = Vocabulary(**blob["vocab"])
    model = AsrModel(config, vocab, sample_rate=int(blob["sample_rate"]))
    model.load_state_dict(blob["state"])
    return model
