"""Flat ``key=value`` pipeline configuration.

Precedence is defaults < file < overrides. ``noise_multiplier=auto`` asks
the accountant to calibrate; ``epsilon=inf`` selects the non-private mode.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional

from .errors import ConfigurationError


@dataclass(frozen=True)
class PipelineConfig:
    # data / wavelet
    image_size: int = 16
    channels: int = 1
    depth: int = 2
    n_classes: int = 8
    # tokenizer
    approx_patch: int = 2
    detail_patch: int = 4
    k_approx: int = 64
    k_detail: int = 32
    codebook_seed: int = 0
    # model
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_mlp: int = 64
    model_seed: int = 0
    # public pretraining
    pretrain_steps: int = 400
    pretrain_batch: int = 64
    pretrain_lr: float = 3e-3
    # private finetuning
    clip_norm: float = 1.0
    noise_multiplier: Optional[float] = None
    batch_size: int = 128
    steps: int = 300
    lr: float = 3e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 25
    schedule: str = "warmup_cosine"
    dp_seed: int = 0
    epsilon: float = 8.0
    delta: float = 1e-5
    # generation
    temperature: float = 1.0
    sample_seed: int = 0
    # paths
    public_manifest: str = ""
    private_manifest: str = ""
    eval_manifest: str = ""

    def replace(self, **kw) -> "PipelineConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> Dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "Optional[float]":
            return None if raw.lower() == "auto" else float(raw)
        return raw
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(lines: Iterable[str], source: str = "<input>") -> Dict[str, object]:
    out: Dict[str, object] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    values: Dict[str, object] = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        values.update(parse_pairs(p.read_text().splitlines(), str(p)))
    if overrides:
        values.update(parse_pairs((f"{k}={v}" for k, v in overrides.items()), "<flags>"))
    cfg = PipelineConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    if cfg.depth < 1:
        raise ConfigurationError("depth must be >= 1")
    if cfg.image_size % (2 ** (cfg.depth + 1)):
        raise ConfigurationError(
            f"image_size={cfg.image_size} must be divisible by {2 ** (cfg.depth + 1)}"
        )
    if cfg.channels not in (1, 3):
        raise ConfigurationError("channels must be 1 or 3")
    if cfg.optimizer not in ("sgd", "adam"):
        raise ConfigurationError("optimizer must be sgd or adam")
    if not cfg.epsilon > 0:
        raise ConfigurationError("epsilon must be > 0 (use inf for non-private)")
    if not 0 < cfg.delta < 1:
        raise ConfigurationError("delta must lie in (0, 1)")
    if cfg.noise_multiplier is not None and cfg.noise_multiplier < 0:
        raise ConfigurationError("noise_multiplier must be >= 0")
    if cfg.d_model % cfg.n_heads:
        raise ConfigurationError("d_model must be divisible by n_heads")
