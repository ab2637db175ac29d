"""Training configuration and its key-value file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

DEFAULT_INITIAL_LR = 1e-3
DEFAULT_FINAL_LR = 1e-4
DEFAULT_SYNC_PERIOD = 5
DEFAULT_RNNT_BATCH = 8
DEFAULT_MBR_BATCH = 4
DEFAULT_MAX_UTT_SECONDS = 12.0
DEFAULT_BPTT = 64

MODES = ("rnnt", "mbr", "nnlm")
OPTIMIZERS = ("sgd", "adam")


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


@dataclass(frozen=True)
class TrainConfig:
    """Schedule, batching, BMUF and MBR settings for one training run.

    ``block_momentum`` and ``block_lr`` default to common BMUF practice;
    ``optimizer`` picks the per-worker inner update rule.
    """

    mode: str = "rnnt"
    initial_lr: float = DEFAULT_INITIAL_LR
    final_lr: float = DEFAULT_FINAL_LR
    epochs: int = 1
    batch_size: int = DEFAULT_RNNT_BATCH
    sync_period: int = DEFAULT_SYNC_PERIOD
    workers: int = 1
    block_momentum: float = 0.9
    block_lr: float = 1.0
    use_bmuf: bool = True
    max_utt_seconds: float = DEFAULT_MAX_UTT_SECONDS
    frame_shift: float = 0.01
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.0
    grad_clip: float = 0.0
    dropout_seed: int = 0
    # MBR
    nbest_size: int = 2
    reg_lambda: float = 1.0
    search_beta: float = 1.0
    lm_weight: float = 0.0
    use_nnlm_in_search: bool = False
    # NNLM
    bptt: int = DEFAULT_BPTT
    # evaluation
    eval_beam: int = 4
    eval_beta: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer: expected one of {OPTIMIZERS}, got {self.optimizer!r}")
        for key in ("initial_lr", "final_lr", "max_utt_seconds", "frame_shift"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key}: must be positive")
        if self.final_lr > self.initial_lr:
            raise ConfigError("final_lr: must not exceed initial_lr")
        if self.epochs < 0:
            raise ConfigError("epochs: must be non-negative")
        for key in ("batch_size", "sync_period", "workers", "nbest_size", "bptt", "eval_beam"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1")
        if not self.use_bmuf and self.workers != 1:
            raise ConfigError("workers: serial training (use_bmuf = false) needs exactly one worker")
        if not 0.0 <= self.block_momentum < 1.0:
            raise ConfigError("block_momentum: must be in [0, 1)")
        if self.block_lr <= 0:
            raise ConfigError("block_lr: must be positive")
        if self.reg_lambda < 0:
            raise ConfigError("reg_lambda: must be non-negative")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip: must be non-negative")
        for key in ("search_beta", "eval_beta"):
            if not 0.0 < getattr(self, key) <= 1.0:
                raise ConfigError(f"{key}: must be in (0, 1]")
        if not 0.0 <= self.lm_weight <= 1.0:
            raise ConfigError("lm_weight: must be in [0, 1]")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def recipe_rnnt_config(**overrides) -> TrainConfig:
    return TrainConfig(mode="rnnt", batch_size=DEFAULT_RNNT_BATCH, **overrides)


def recipe_mbr_config(**overrides) -> TrainConfig:
    return TrainConfig(mode="mbr", batch_size=DEFAULT_MBR_BATCH, nbest_size=2, reg_lambda=1.0, **overrides)


# ------------------------------------------------------------ file format


def parse_value(text: str, kind: type, key: str) -> Any:
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip('"')
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def read_kv_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def write_kv_file(path, values: Mapping[str, Any]) -> None:
    lines = []
    for k, v in values.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def config_types(cls=TrainConfig) -> dict[str, type]:
    types = {"str": str, "int": int, "float": float, "bool": bool}
    return {f.name: types.get(f.type, f.type) if isinstance(f.type, str) else f.type for f in fields(cls)}


def train_config_from_strings(values: Mapping[str, str], base: TrainConfig | None = None) -> TrainConfig:
    types = config_types()
    parsed = {}
    for key, text in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        parsed[key] = parse_value(text, types[key], key)
    return (base or TrainConfig()).replace(**parsed)
