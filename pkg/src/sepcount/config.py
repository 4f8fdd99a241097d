"""Experiment configuration: a flat key-value store with dotted keys.

Config files are plain text, one ``key = value`` per line with ``#``
comments; CLI flags mirror the keys exactly (``--train.scheme=orpit_multi``).
Values are coerced to the type of the built-in default.  Unknown keys and
malformed values raise ConfigError, which the CLI maps to exit code 2.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .asr import AsrConfig
from .counting import StopRule
from .separator import SeparatorConfig
from .signals import DatasetSpec


class ConfigError(Exception):
    """Invalid configuration (unknown key, bad value, missing requirement)."""


DEFAULTS: dict[str, Any] = {
    # dataset synthesis
    "dataset.out": "",
    "dataset.counts": "2:20",          # "K:count" pairs, comma separated
    "dataset.modes": "min",
    "dataset.kinds": "band_noise",
    "dataset.seed": 0,
    "dataset.sample_rate": 8000,
    "dataset.duration_min_s": 0.5,
    "dataset.duration_max_s": 0.8,
    "dataset.tokens_min": 3,
    "dataset.tokens_max": 6,
    "dataset.gain_jitter_db": 0.0,
    # separator architecture
    "separator.window": 16,
    "separator.stride": 8,
    "separator.latent": 32,
    "separator.blocks": 2,
    "separator.hidden": 32,
    "separator.chunk": 50,
    "separator.outputs": 2,
    "separator.stop_flag": False,
    # stop rule for iterative extraction
    "stop.kind": "threshold",
    "stop.gamma": 1e-4,
    "stop.flag_cutoff": 0.5,
    "stop.max_iterations": 6,
    # recognizer
    "asr.window": 128,
    "asr.hop": 64,
    "asr.features": 32,
    "asr.conv_channels": 8,
    "asr.encoder_hidden": 32,
    "asr.decoder_hidden": 32,
    "asr.attention_dim": 32,
    "asr.lambda": 0.2,
    "asr.max_decode_steps": 60,
    # training
    "train.manifest": "",
    "train.dev_manifest": "",
    "train.out": "",
    "train.scheme": "tasnet_fixed",    # tasnet_fixed | orpit_single | orpit_multi
    "train.mode": "fe_only",           # fe_only | asr_only | both
    "train.steps": 100,
    "train.batch": 8,
    "train.lr": 1e-3,
    "train.seed": 0,
    "train.crop_s": 0.5,
    "train.base_loss": "auto",         # auto | t_lmse | t_l1pmse
    "train.feedback_ratio": 0.5,
    "train.dev_every": 50,
    "train.threads": 1,
    "train.fe_checkpoint": "",
    "train.asr_checkpoint": "",
    "train.fe_weight": 1.0,
    # evaluation
    "eval.manifest": "",
    "eval.checkpoint": "",
    "eval.asr_checkpoint": "",
    "eval.out": "",
    "eval.mode": "auto",               # fixed | iterative | auto
    "eval.oracle_count": True,
    "eval.vad": False,
    "eval.vad_threshold_db": 30.0,
    "eval.gamma_file": "",
    "eval.threads": 1,
    # subcommand inputs
    "separate.input": "",
    "separate.out_dir": "",
    "separate.iterative": False,
    "count.input": "",
    "count.manifest": "",
    "calibrate.checkpoint": "",
    "calibrate.manifest": "",
    "calibrate.out": "",
    "report.records": "",
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(key: str, raw: str) -> Any:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key: {key!r}")
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return raw


def parse_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, Any] = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value'")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def parse_overrides(args: Iterable[str]) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for arg in args:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigError(f"expected --key=value, got {arg!r}")
        key, raw = arg[2:].split("=", 1)
        values[key] = _coerce(key, raw)
    return values


def _parse_counts(raw: str) -> dict[int, int]:
    counts: dict[int, int] = {}
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            k, n = part.split(":")
            counts[int(k)] = int(n)
        except ValueError as exc:
            raise ConfigError(
                f"dataset.counts: expected 'K:count' pairs, got {part!r}") from exc
    if not counts:
        raise ConfigError("dataset.counts is empty")
    return counts


@dataclass
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def load(cls, config_path: str | Path | None = None,
             overrides: Iterable[str] = ()) -> "ExperimentConfig":
        values = dict(DEFAULTS)
        if config_path:
            values.update(parse_config_file(config_path))
        values.update(parse_overrides(overrides))
        return cls(values)

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"unknown config key: {key!r}")
        return self.values[key]

    def require(self, key: str) -> Any:
        value = self[key]
        if value == "":
            raise ConfigError(f"config key {key!r} must be set")
        return value

    def choice(self, key: str, allowed: tuple[str, ...]) -> str:
        value = self[key]
        if value not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {value!r}")
        return value

    def separator_config(self) -> SeparatorConfig:
        try:
            return SeparatorConfig(
                encoder_window=self["separator.window"],
                encoder_stride=self["separator.stride"],
                latent_dim=self["separator.latent"],
                num_blocks=self["separator.blocks"],
                hidden_units=self["separator.hidden"],
                chunk_size=self["separator.chunk"],
                num_outputs=self["separator.outputs"],
                stop_flag=self["separator.stop_flag"],
            )
        except ValueError as exc:
            raise ConfigError(f"invalid separator config: {exc}") from exc

    def asr_config(self) -> AsrConfig:
        try:
            return AsrConfig(
                stft_window=self["asr.window"],
                stft_hop=self["asr.hop"],
                num_features=self["asr.features"],
                conv_channels=self["asr.conv_channels"],
                encoder_hidden=self["asr.encoder_hidden"],
                decoder_hidden=self["asr.decoder_hidden"],
                attention_dim=self["asr.attention_dim"],
                ctc_weight=self["asr.lambda"],
                max_decode_steps=self["asr.max_decode_steps"],
            )
        except ValueError as exc:
            raise ConfigError(f"invalid recognizer config: {exc}") from exc

    def stop_rule(self, gamma: float | None = None) -> StopRule:
        try:
            return StopRule(
                kind=self.choice("stop.kind", ("threshold", "flag")),
                gamma=gamma if gamma is not None else self["stop.gamma"],
                flag_cutoff=self["stop.flag_cutoff"],
                max_iterations=self["stop.max_iterations"],
            )
        except ValueError as exc:
            raise ConfigError(f"invalid stop rule: {exc}") from exc

    def dataset_spec(self) -> DatasetSpec:
        modes = tuple(m.strip() for m in str(self["dataset.modes"]).split(",") if m.strip())
        kinds = tuple(k.strip() for k in str(self["dataset.kinds"]).split(",") if k.strip())
        try:
            return DatasetSpec(
                counts_per_k=_parse_counts(str(self["dataset.counts"])),
                output_dir=self.require("dataset.out"),
                modes=modes,
                kinds=kinds,
                seed=self["dataset.seed"],
                sample_rate=self["dataset.sample_rate"],
                duration_range_s=(self["dataset.duration_min_s"],
                                  self["dataset.duration_max_s"]),
                tokens_range=(self["dataset.tokens_min"], self["dataset.tokens_max"]),
                gain_jitter_db=self["dataset.gain_jitter_db"],
            )
        except ValueError as exc:
            raise ConfigError(f"invalid dataset spec: {exc}") from exc
