"""Run configuration: one JSON file with a version field; unknown keys are rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import DataConfig
from .decoder import DecoderConfig
from .mllm import ModelConfig
from .tokenizer import ConfigError, TokenizerConfig

CONFIG_VERSION = 1


@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 16  # split evenly between the understanding and generation branches
    lr: float = 3e-4
    weight_decay: float = 0.01
    lambda_vis: float = 1.0
    lambda_dec: float = 1.0
    commitment: float = 0.25
    ema_decay: float = 0.999
    checkpoint_every: int = 500
    train_tokenizer: bool = True
    augment: bool = True  # mirror and recolour the understanding half-batch

    def __post_init__(self):
        if self.lambda_vis < 0 or self.lambda_dec < 0 or self.commitment < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.batch < 2 or self.batch % 2:
            raise ConfigError("batch must be an even number of at least 2")
        if self.steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("steps must be non-negative and checkpoint_every positive")


@dataclass
class EvalConfig:
    split: str = "test"
    decode_seed: int = 0
    temperature: float = 1.0
    top_k: int = 32
    text_temperature: float = 0.0
    max_answer: int = 8
    decoder: str = "diffusion"
    categories: list[str] | None = None

    def __post_init__(self):
        if self.decoder not in ("diffusion", "regress"):
            raise ConfigError(f"unknown decoder path {self.decoder!r}")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {self.split!r}")


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {"data": DataConfig, "tokenizer": TokenizerConfig, "model": ModelConfig,
             "decoder": DecoderConfig, "train": TrainConfig, "eval": EvalConfig}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {"version", "seed", *_SECTIONS})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    version = raw.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    parts = {name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return RunConfig(version=version, seed=seed, **parts)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
