"""Distillation hyperparameters and the flat ``key = value`` config format."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 4.0
    lam: float = 0.4
    gamma: float = 0.6
    mu: float = 1e-4
    seed: int = 42
    n_train: int = 500
    n_eval: int = 100
    epochs: int = 12
    teacher_epochs: int = 20
    teacher_width: int = 48
    student_width: int = 32
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    distill_clip_norm: float = 1.0
    n_props: int = 8
    patch_size: int = 7
    region_cells: float = 5.0
    teacher_gate: float = 0.8

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_overrides(self, **kw) -> "DistillConfig":
        return replace(self, **{k: _coerce(k, v) for k, v in kw.items() if v is not None})


_TYPES = {f.name: f.type for f in fields(DistillConfig)}


def _coerce(key: str, value):
    if key not in _TYPES:
        raise KeyError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if kind in ("int", int):
        return int(value)
    return float(value)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def load_config(path) -> DistillConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return DistillConfig().with_overrides(**parse_config_text(path.read_text()))


def format_config(cfg: DistillConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in cfg.to_dict().items())
