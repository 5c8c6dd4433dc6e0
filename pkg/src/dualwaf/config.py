"""Model and training configuration, with JSON round-trip and dotted overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .request import DEFAULT_HEADER_PARAMS

CHANNEL_MODES = ("dual", "url_only", "payload_only")
PAYLOAD_MODES = ("set_fusion", "flat")
EMBEDDING_MODES = ("hge", "wordpiece", "char", "word")


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    layers: int = 2
    hidden: int = 128
    heads: int = 4
    intermediate: int = 512
    vocab_size: int = 5000
    max_len: int = 64
    max_chars: int = 256
    char_dim: int = 128
    gru_hidden: int = 64


@dataclass
class FusionConfig:
    heads: int = 4
    head_size: int = 32
    intermediate: int = 512


@dataclass
class DetectorConfig:
    url_encoder: EncoderConfig = field(default_factory=EncoderConfig)
    param_encoder: EncoderConfig = field(
        default_factory=lambda: EncoderConfig(vocab_size=52000, max_len=128, max_chars=512)
    )
    fusion: FusionConfig = field(default_factory=FusionConfig)
    max_params: int = 32
    flat_max_len: int = 256
    channel_mode: str = "dual"
    payload_mode: str = "set_fusion"
    embedding_mode: str = "hge"
    dropout: float = 0.1
    header_params: list[str] = field(default_factory=lambda: list(DEFAULT_HEADER_PARAMS))

    def validate(self) -> "DetectorConfig":
        if self.channel_mode not in CHANNEL_MODES:
            raise ConfigError(f"channel_mode must be one of {CHANNEL_MODES}, got {self.channel_mode!r}")
        if self.payload_mode not in PAYLOAD_MODES:
            raise ConfigError(f"payload_mode must be one of {PAYLOAD_MODES}, got {self.payload_mode!r}")
        if self.embedding_mode not in EMBEDDING_MODES:
            raise ConfigError(f"embedding_mode must be one of {EMBEDDING_MODES}, got {self.embedding_mode!r}")
        if self.url_encoder.hidden != self.param_encoder.hidden:
            raise ConfigError("url_encoder.hidden and param_encoder.hidden must match")
        if self.fusion.heads * self.fusion.head_size != self.param_encoder.hidden:
            raise ConfigError("fusion.heads * fusion.head_size must equal the hidden size")
        for enc in (self.url_encoder, self.param_encoder):
            if enc.hidden % enc.heads:
                raise ConfigError("encoder hidden size must be divisible by its head count")
            if enc.max_len < 2:
                raise ConfigError("encoder max_len must be >= 2")
        if self.max_params < 1:
            raise ConfigError("max_params must be >= 1")
        return self

    @property
    def hidden(self) -> int:
        return self.url_encoder.hidden


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 2e-5
    warmup_frac: float = 0.01
    weight_decay: float = 0.01
    seed: int = 0
    threads: int = 1

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        return self


@dataclass
class RunConfig:
    model: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        d = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            _set_dotted(d, key.strip(), raw.strip())
        return RunConfig.from_dict(d)


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    defaults = cls()
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(defaults, key)
        if is_dataclass(current):
            kwargs[key] = _build(type(current), value, path + ".")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _coerce(current: Any, raw: str, key: str) -> Any:
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, list):
            return [s for s in raw.split(",") if s]
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
    return raw


def _set_dotted(d: dict, key: str, raw: str) -> None:
    parts = key.split(".")
    node = d
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key {key!r}")
        if i == len(parts) - 1:
            if isinstance(node[part], dict):
                raise ConfigError(f"config key {key!r} is a section, not a value")
            node[part] = _coerce(node[part], raw, key)
        else:
            node = node[part]


def desk_scale() -> RunConfig:
    """Small CPU configuration.

    The training rate is raised because encoders start from random weights,
    and the parameter vocabulary is capped at 8000 so the trainer does not
    spend most of its merges memorising one-off values on a small corpus.
    """
    return RunConfig(
        model=DetectorConfig(param_encoder=EncoderConfig(vocab_size=8000, max_len=128, max_chars=512)),
        train=TrainConfig(lr=1e-3),
    )


def full_scale() -> RunConfig:
    """BERT-base sized encoders with the published fusion and char-embedding sizes."""
    enc = dict(layers=12, hidden=768, heads=12, intermediate=3072, char_dim=768, gru_hidden=384)
    return RunConfig(
        model=DetectorConfig(
            url_encoder=EncoderConfig(vocab_size=5000, max_len=64, max_chars=256, **enc),
            param_encoder=EncoderConfig(vocab_size=52000, max_len=128, max_chars=512, **enc),
            fusion=FusionConfig(heads=12, head_size=64, intermediate=3072),
        ),
    )
