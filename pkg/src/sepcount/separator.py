"""Time-domain separation network with a dual-path recurrent core.

A learned 1-D conv filterbank encodes the waveform into latent frames, a
stack of dual-path blocks alternates recurrences within chunks (short range)
and across chunks (long range), a 1x1 conv emits one multiplicative sigmoid
mask per output stream on the encoder output, and a transposed conv
overlap-adds each masked latent back to a waveform of the input length.

With ``stop_flag`` enabled the 1x1 conv grows by one extra latent bank whose
frames feed a per-frame linear scalar, mean-pooled over time and squashed to
a stop probability (high = the residual output should be empty).

Every component is smooth (sigmoid masks, LSTM cores, linear maps), so the
whole forward pass is differentiable and checkable with finite differences.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .signals import Waveform


@dataclass(frozen=True)
class SeparatorConfig:
    """Architecture hyperparameters.

    Defaults are the desk-scale setting (CPU-trainable); ``full_scale`` gives
    the 6-block / 128-unit / chunk-100 configuration.
    """

    encoder_window: int = 16
    encoder_stride: int = 8
    latent_dim: int = 32
    num_blocks: int = 2
    hidden_units: int = 32
    chunk_size: int = 50
    num_outputs: int = 2
    stop_flag: bool = False

    def __post_init__(self) -> None:
        if self.encoder_stride > self.encoder_window:
            raise ValueError("encoder stride must not exceed the window")
        if self.num_outputs < 1:
            raise ValueError("need at least one output stream")
        if self.chunk_size < 1:
            raise ValueError("chunk size must be >= 1")
        if min(self.encoder_window, self.encoder_stride, self.latent_dim,
               self.num_blocks, self.hidden_units) < 1:
            raise ValueError("architecture sizes must be positive")

    @classmethod
    def full_scale(cls, num_outputs: int = 2, stop_flag: bool = False) -> "SeparatorConfig":
        return cls(encoder_window=16, encoder_stride=8, latent_dim=64,
                   num_blocks=6, hidden_units=128, chunk_size=100,
                   num_outputs=num_outputs, stop_flag=stop_flag)


@dataclass
class SeparatorOutput:
    """Estimated streams (input length each) plus the optional stop flag."""

    streams: list[Waveform]
    stop_flag_prob: float | None = None


def _segment(x: torch.Tensor, chunk: int, hop: int) -> tuple[torch.Tensor, int]:
    """(B, F, N) -> half-overlapping chunks (B, S, chunk, N); returns orig F."""
    b, frames, n = x.shape
    s = max(0, math.ceil(max(frames - chunk, 0) / hop)) + 1
    total = (s - 1) * hop + chunk
    if total > frames:
        x = torch.nn.functional.pad(x, (0, 0, 0, total - frames))
    segs = x.unfold(1, chunk, hop)  # (B, S, N, chunk)
    return segs.permute(0, 1, 3, 2).contiguous(), frames


def _overlap_add(segs: torch.Tensor, frames: int, hop: int) -> torch.Tensor:
    """Inverse of _segment with mean normalization on overlaps."""
    b, s, chunk, n = segs.shape
    total = (s - 1) * hop + chunk
    out = segs.new_zeros(b, total, n)
    weight = segs.new_zeros(total)
    for i in range(s):
        out[:, i * hop:i * hop + chunk] += segs[:, i]
        weight[i * hop:i * hop + chunk] += 1.0
    return (out / weight.clamp(min=1.0).view(1, -1, 1))[:, :frames]


class DualPathBlock(nn.Module):
    """One intra-chunk + inter-chunk bidirectional recurrence pair."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.intra_rnn = nn.LSTM(dim, hidden, batch_first=True, bidirectional=True)
        self.intra_proj = nn.Linear(2 * hidden, dim)
        self.intra_norm = nn.LayerNorm(dim)
        self.inter_rnn = nn.LSTM(dim, hidden, batch_first=True, bidirectional=True)
        self.inter_proj = nn.Linear(2 * hidden, dim)
        self.inter_norm = nn.LayerNorm(dim)

    def forward(self, segs: torch.Tensor) -> torch.Tensor:  # (B, S, C, N)
        b, s, c, n = segs.shape
        x = segs.reshape(b * s, c, n)
        y, _ = self.intra_rnn(x)
        x = x + self.intra_norm(self.intra_proj(y))
        x = x.reshape(b, s, c, n).permute(0, 2, 1, 3).reshape(b * c, s, n)
        y, _ = self.inter_rnn(x)
        x = x + self.inter_norm(self.inter_proj(y))
        return x.reshape(b, c, s, n).permute(0, 2, 1, 3)


class DprnnSeparator(nn.Module):
    def __init__(self, config: SeparatorConfig):
        super().__init__()
        self.config = config
        n, k = config.latent_dim, config.num_outputs
        self.encoder = nn.Conv1d(1, n, config.encoder_window,
                                 stride=config.encoder_stride, bias=False)
        self.blocks = nn.ModuleList(
            DualPathBlock(n, config.hidden_units) for _ in range(config.num_blocks))
        out_banks = k + (1 if config.stop_flag else 0)
        self.mask_conv = nn.Conv1d(n, out_banks * n, 1)
        self.decoder = nn.ConvTranspose1d(n, 1, config.encoder_window,
                                          stride=config.encoder_stride, bias=False)
        self.flag_linear = nn.Linear(n, 1) if config.stop_flag else None

    @property
    def num_outputs(self) -> int:
        return self.config.num_outputs

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T) -> latent frames (B, N, F) with F = (T - window)//stride + 1."""
        if x.shape[-1] < self.config.encoder_window:
            raise ValueError("input shorter than one encoder window")
        return self.encoder(x.unsqueeze(1))

    def core(self, latent: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """(B, N, F) -> sigmoid masks (B, K, N, F) and flag features (B, F, N)."""
        b, n, frames = latent.shape
        if frames < 1:
            raise ValueError("need at least one latent frame")
        hop = max(1, self.config.chunk_size // 2)
        segs, orig = _segment(latent.transpose(1, 2), self.config.chunk_size, hop)
        for block in self.blocks:
            segs = block(segs)
        core_out = _overlap_add(segs, orig, hop).transpose(1, 2)  # (B, N, F)
        proj = self.mask_conv(core_out)
        k = self.config.num_outputs
        masks = torch.sigmoid(proj[:, :k * n]).reshape(b, k, n, frames)
        flag_feats = proj[:, k * n:].transpose(1, 2) if self.config.stop_flag else None
        return masks, flag_feats

    def decode(self, latent: torch.Tensor, length: int) -> torch.Tensor:
        """(B, N, F) -> (B, length) by transposed-conv overlap-add."""
        y = self.decoder(latent).squeeze(1)
        if y.shape[-1] >= length:
            return y[..., :length]
        return torch.nn.functional.pad(y, (0, length - y.shape[-1]))

    def stop_flag_head(self, features: torch.Tensor) -> torch.Tensor:
        """Per-frame linear scalar, mean-pooled over time, sigmoid.

        Accepts (F, N) or (B, F, N); the pooling makes the result invariant
        to duplicating the frame sequence.
        """
        if self.flag_linear is None:
            raise RuntimeError("this separator has no stop-flag head")
        squeeze = features.dim() == 2
        if squeeze:
            features = features.unsqueeze(0)
        if features.shape[1] < 1:
            raise ValueError("need at least one time step")
        per_frame = self.flag_linear(features).squeeze(-1)  # (B, F)
        prob = torch.sigmoid(per_frame.mean(dim=-1))
        return prob[0] if squeeze else prob

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """(B, T) -> streams (B, K, T) and stop-flag probabilities (B,)."""
        latent = self.encode(x)
        masks, flag_feats = self.core(latent)
        masked = latent.unsqueeze(1) * masks
        b, k, n, frames = masked.shape
        streams = self.decode(masked.reshape(b * k, n, frames),
                              x.shape[-1]).reshape(b, k, -1)
        flag = self.stop_flag_head(flag_feats) if flag_feats is not None else None
        return streams, flag

    def separate(self, wav: Waveform) -> SeparatorOutput:
        """Run inference on one waveform.

        Deliberately not wrapped in no_grad: LSTM forward kernels differ in
        their lowest bits between grad modes, and the iterative-extraction
        loop is contractually bit-identical to the unrolled training forward.
        The outputs are detached, so no graph survives this call.
        """
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(wav.samples, dtype=dtype).unsqueeze(0)
        streams, flag = self.forward(x)
        out = [Waveform(s.detach().numpy().astype(np.float64), wav.sample_rate)
               for s in streams[0]]
        return SeparatorOutput(out, flag[0].item() if flag is not None else None)


CHECKPOINT_FORMAT = "sepcount.separator.v1"


def save_separator(path: str | Path, model: DprnnSeparator) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "state": model.state_dict(),
    }, str(path))


def load_separator(path: str | Path,
                   expected_config: SeparatorConfig | None = None) -> DprnnSeparator:
    """Rebuild a separator from a checkpoint, verifying the stored config."""
    blob = torch.load(str(path), map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a separator checkpoint")
    config = SeparatorConfig(**blob["config"])
    if expected_config is not None and config != expected_config:
        raise ValueError(
            f"checkpoint config {config} does not match expected {expected_config}")
    model = DprnnSeparator(config)
    model.load_state_dict(blob["state"])
    return model
