from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError


@dataclass
class ModelConfig:
    # Widths
    base_channels: int = 64
    growth_rate: int = 32
    dense_layers_per_block: int = 4

    # Region grids per NEDB (1 = global non-local)
    encoder_grids: List[int] = field(default_factory=lambda: [8, 4, 2])
    decoder_grids: List[int] = field(default_factory=lambda: [1, 2, 4])

    # Ablation switches
    nonlocal_enabled: bool = True
    dense_connections_enabled: bool = True
    pooling_enabled: bool = True
    # Only used when pooling is off (flat cascade of NEDBs)
    num_blocks: int = 6

    # 'softmax' | 'raw-sum'
    affinity_mode: str = "softmax"
    # Decoder upsampling when pooling is on: 'indices' | 'bilinear'
    upsample_mode: str = "indices"

    seed: int = 0

    @property
    def embed_channels(self) -> int:
        return max(1, self.base_channels // 2)

    def grids_for_blocks(self) -> List[int]:
        """Grid size of every NEDB in execution order."""
        ladder = list(self.encoder_grids) + list(self.decoder_grids)
        if self.pooling_enabled:
            return ladder
        return [ladder[i % len(ladder)] for i in range(self.num_blocks)]

    def validate(self) -> "ModelConfig":
        for name in ("base_channels", "growth_rate", "dense_layers_per_block", "num_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.pooling_enabled and (len(self.encoder_grids) != 3 or len(self.decoder_grids) != 3):
            raise ConfigError("encoder_grids and decoder_grids need exactly 3 entries when pooling is enabled")
        if not self.encoder_grids or not self.decoder_grids:
            raise ConfigError("grid lists must not be empty")
        for k in list(self.encoder_grids) + list(self.decoder_grids):
            if k < 1 or k > 8 or k & (k - 1):
                raise ConfigError(f"grid sizes must be powers of two in [1, 8], got {k}")
        if self.affinity_mode not in ("softmax", "raw-sum"):
            raise ConfigError(f"affinity_mode must be 'softmax' or 'raw-sum', got {self.affinity_mode!r}")
        if self.upsample_mode not in ("indices", "bilinear"):
            raise ConfigError(f"upsample_mode must be 'indices' or 'bilinear', got {self.upsample_mode!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        return self


@dataclass
class TrainConfig:
    lr_init: float = 5e-4
    lr_floor: float = 1e-4
    lr_decay_factor: float = 0.9
    plateau_patience: int = 500
    ema_decay: float = 0.99
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # One image per step; there is no batch axis anywhere.
    batch_size: int = 1
    max_steps: int = 1000
    checkpoint_every: int = 250
    log_every: int = 50
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not 0 < self.lr_floor <= self.lr_init:
            raise ConfigError(f"need 0 < lr_floor <= lr_init, got {self.lr_floor} / {self.lr_init}")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError(f"lr_decay_factor must be in (0, 1), got {self.lr_decay_factor}")
        if not 0 < self.ema_decay < 1:
            raise ConfigError(f"ema_decay must be in (0, 1), got {self.ema_decay}")
        if self.batch_size != 1:
            raise ConfigError("batch_size must be 1")
        # the first EMA value is a baseline step, so patience 1 would decay on step 1
        if self.plateau_patience < 2:
            raise ConfigError("plateau_patience must be >= 2")
        if self.max_steps < 0 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("max_steps must be >= 0; checkpoint_every and log_every >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        return self


# Ablation ladder: switches applied on top of a base model config.
VARIANTS: Dict[str, Dict[str, Any]] = {
    "Ra": dict(num_blocks=1, dense_connections_enabled=False, pooling_enabled=False, nonlocal_enabled=False),
    "Rb": dict(num_blocks=1, dense_connections_enabled=True, pooling_enabled=False, nonlocal_enabled=False),
    "Rc": dict(num_blocks=6, dense_connections_enabled=True, pooling_enabled=False, nonlocal_enabled=False),
    "Rd": dict(num_blocks=6, dense_connections_enabled=True, pooling_enabled=True, nonlocal_enabled=False),
    "Re": dict(num_blocks=6, dense_connections_enabled=True, pooling_enabled=False, nonlocal_enabled=True),
    "Rf": dict(num_blocks=6, dense_connections_enabled=True, pooling_enabled=True, nonlocal_enabled=True),
}

MICRO = ModelConfig(base_channels=4, growth_rate=2, dense_layers_per_block=2)
SMALL = ModelConfig(base_channels=8, growth_rate=4, dense_layers_per_block=4)


def variant_config(name: str, base: Optional[ModelConfig] = None) -> ModelConfig:
    key = name.replace("_", "")
    key = key[:1].upper() + key[1:].lower()
    if key not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return replace(base or ModelConfig(), **VARIANTS[key]).validate()


@dataclass
class AppConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    # Runtime
    threads: int = 1
    queue_capacity: int = 4
    debug: bool = False
    log_level: str = "INFO"


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, current: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, list):
            return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r}") from e
    return raw


def apply_overrides(cfg: AppConfig, values: Dict[str, Any]) -> AppConfig:
    """Set TrainConfig / ModelConfig fields by name; strings are coerced to the field type."""
    model_names = {f.name for f in fields(ModelConfig)}
    train_names = {f.name for f in fields(TrainConfig)}
    for key, raw in values.items():
        if raw is None:
            continue
        # 'seed' exists on both; a config file seed drives both unless set separately
        targets = []
        if key in train_names:
            targets.append(cfg.train)
        if key in model_names:
            targets.append(cfg.model)
        if key.startswith("model.") and key[6:] in model_names:
            key, targets = key[6:], [cfg.model]
        if not targets:
            raise ConfigError(f"unknown config key {key!r}")
        for target in targets:
            current = getattr(target, key)
            setattr(target, key, _coerce(raw, current, key) if isinstance(raw, str) else raw)
    return cfg


def load_config(path: str | Path | None = None) -> AppConfig:
    """Load .env overrides, then an optional flat `key = value` config file."""
    load_dotenv(override=False)
    cfg = AppConfig()

    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        apply_overrides(cfg, dict(dotenv_values(p)))

    # Allow environment overrides
    cfg.threads = int(os.getenv("NLEDN_THREADS", cfg.threads))
    cfg.queue_capacity = int(os.getenv("NLEDN_QUEUE", cfg.queue_capacity))
    cfg.debug = os.getenv("NLEDN_DEBUG", "").lower() in _TRUE
    cfg.log_level = os.getenv("NLEDN_LOG_LEVEL", cfg.log_level).upper()

    if cfg.threads < 1 or cfg.queue_capacity < 1:
        raise ConfigError("NLEDN_THREADS and NLEDN_QUEUE must be >= 1")
    cfg.model.validate()
    cfg.train.validate()
    return cfg


def dump_config(cfg: AppConfig) -> str:
    """Render the model + train fields in the same `key = value` form load_config reads."""
    lines = []
    for section in (cfg.train, cfg.model):
        prefix = "model." if section is cfg.model else ""
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{prefix}{f.name} = {value}")
    return "\n".join(lines) + "\n"
