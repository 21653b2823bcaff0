#!/usr/bin/env python3
"""Training configuration and the flat key=value config file format.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment. Keys are the TrainConfig field names. Command-line flags override
file values.
"""

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from pcgp import common as rc

# Probe locations (x, y) used for the pointwise distribution comparison.
DEFAULT_PROBES = ((0.59375, 0.21875), (0.71875, 0.21875), (0.71875, 0.4375), (0.6875, 0.3125))


@dataclass(frozen=True)
class TrainConfig:
    # grid and data
    nx: int = 16
    ny: int = 16
    kl_length: float = 0.2
    kl_modes: int = 64
    train_count: int = 256
    val_count: int = 64
    test_count: int = 512
    # objective
    beta: float = 1.0
    gamma: float = 1.0
    sigma2: float = 1e-4
    jitter: float = 1e-8
    l: float = 2.0
    squared_kernel: bool = False
    # batching
    batch_size: int = 96
    known_count: int = 48
    epochs: int = 150
    # optimizer
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # architecture
    hidden: tuple[int, ...] = (128,)
    latent: int = 32
    activation: str = "tanh"
    dae_noise: float = 0.05
    log_input: bool = True
    input_scale: float = 0.1
    # evaluation
    max_conditioning: int = 256
    probes: tuple[tuple[float, float], ...] = field(default=DEFAULT_PROBES)
    hist_bins: int = 20

    def validate(self) -> "TrainConfig":
        problems = []
        if self.nx < 3 or self.ny < 3:
            problems.append(f"grid must be at least 3x3, got {self.ny}x{self.nx}")
        if not 0 < self.known_count < self.batch_size:
            problems.append(f"known_count must satisfy 0 < {self.known_count} < batch_size {self.batch_size}")
        for name in ("beta", "gamma", "sigma2", "jitter", "lr", "dae_noise"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                problems.append(f"{name} must be a finite non-negative number, got {value}")
        if not (self.input_scale > 0 and math.isfinite(self.input_scale)):
            problems.append(f"input_scale must be a finite positive number, got {self.input_scale}")
        if not self.l > 0:
            problems.append(f"l must be positive, got {self.l}")
        if self.epochs < 0:
            problems.append(f"epochs must be non-negative, got {self.epochs}")
        if self.latent < 1 or any(h < 1 for h in self.hidden):
            problems.append("layer widths must be positive")
        if self.max_conditioning < 1 or self.hist_bins < 1:
            problems.append("max_conditioning and hist_bins must be positive")
        if self.seed < 0:
            problems.append(f"seed must be non-negative, got {self.seed}")
        if not 1 <= self.kl_modes <= self.nx * self.ny:
            problems.append(f"kl_modes must lie in [1, {self.nx * self.ny}]")
        for x, y in self.probes:
            if not (0 <= x <= 1 and 0 <= y <= 1):
                problems.append(f"probe ({x}, {y}) lies outside the unit square")
        if problems:
            raise rc.UsageError("; ".join(problems))
        return self

    @property
    def field_size(self) -> int:
        return self.nx * self.ny

    @property
    def encoder_end(self) -> int:
        return len(self.hidden) + 1

    def layer_dims(self) -> list[int]:
        return [self.field_size, *self.hidden, self.latent, *reversed(self.hidden), self.field_size]

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(mapping) - set(known))
        if unknown:
            raise rc.UsageError(f"unknown config keys: {', '.join(unknown)}")
        values = {name: _coerce(name, known[name].type, text) for name, text in mapping.items()}
        return cls(**values).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_render(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()


def _coerce(name: str, kind, text: str):
    text = text.strip()
    try:
        match name:
            case "hidden":
                return tuple(int(part) for part in text.split(",") if part.strip())
            case "probes":
                pairs = []
                for part in text.split(","):
                    x, y = part.split(":")
                    pairs.append((float(x), float(y)))
                return tuple(pairs)
        if kind in (bool, "bool"):
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        return text
    except ValueError:
        raise rc.UsageError(f"invalid value for {name}: {text!r}") from None


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{x!r}:{y!r}" for x, y in value)
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config_text(text: str) -> dict[str, str]:
    mapping: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise rc.UsageError(f"config line {number}: expected 'key = value', got {raw!r}")
        mapping[key.strip()] = value.strip()
    return mapping


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> TrainConfig:
    mapping = parse_config_text(Path(path).read_text()) if path else {}
    config = TrainConfig.from_mapping(mapping)
    changes = {k: v for k, v in (overrides or {}).items() if v is not None}
    return config.replace(**changes) if changes else config
