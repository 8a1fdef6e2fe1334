"""Run configuration: defaults, ``key = value`` files, environment, flags.

Resolution order, later wins: dataclass defaults, the config file, the
``SIMSID_SEED`` environment variable, command-line flags. Unknown keys are
rejected wherever they come from.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .training import LossWeights, TrainConfig

SEED_ENV = "SIMSID_SEED"


class ConfigError(ValueError):
    """Unknown key or unparsable value."""


@dataclass
class RunConfig:
    # data source: "synthetic" or a directory in the train/val/test layout
    data: str = "synthetic"
    n_train: int = 400
    n_val: int = 200  # total, half abnormal
    n_test: int = 200  # total, half abnormal
    contamination: float = 0.0
    out: str = "runs/simsid"
    force: bool = False
    # training
    epochs: int = 200
    batch_size: int = 16
    lr_max: float = 1e-4
    lr_min: float = 2e-5
    weight_decay: float = 1e-5
    gen_period: int = 2
    seed: int = 0
    grid: tuple[int, int] = (4, 4)
    items: int = 100
    top_k: int = 5
    translate: float = 0.05
    scale_range: tuple[float, float] = (0.95, 1.05)
    patience: int = 20
    memory_lr_scale: float = 1.0
    lambda_t: float = 0.01
    lambda_s: float = 10.0
    lambda_dist: float = 0.001
    lambda_gen: float = 0.005
    lambda_dis: float = 0.005
    # evaluation / scoring / sweeps
    checkpoint: str = ""
    image: str = ""
    threshold: str = "best_f1"  # or a number
    eval_batch: int = 50
    sweep: str = ""  # e.g. "grid=1,2,4,8" or "contamination=0,0.1,0.25,0.5"
    log_level: str = "info"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr_max=self.lr_max, lr_min=self.lr_min,
            weight_decay=self.weight_decay, gen_period=self.gen_period, seed=self.seed, grid=self.grid,
            items=self.items, top_k=self.top_k, translate=self.translate, scale_range=self.scale_range,
            patience=self.patience, memory_lr_scale=self.memory_lr_scale,
            weights=LossWeights(self.lambda_t, self.lambda_s, self.lambda_dist, self.lambda_gen, self.lambda_dis),
        )

    def to_text(self) -> str:
        lines = [f"{k} = {format_value(v)}" for k, v in self.pairs()]
        return "\n".join(lines) + "\n"

    def pairs(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_value(key: str, text: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "tuple[int, int]":
            parts = text.replace("x", ",").replace("×", ",").split(",")
            parts = [p for p in parts if p.strip()]
            if len(parts) == 1:
                parts = parts * 2  # "4" means a 4x4 grid
            if len(parts) != 2:
                raise ValueError(text)
            return tuple(int(p) for p in parts)
        if kind == "tuple[float, float]":
            parts = [float(p) for p in text.split(",")]
            if len(parts) != 2:
                raise ValueError(text)
            return tuple(parts)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {text!r} as {kind}") from None


def read_config_file(path: str | os.PathLike) -> dict:
    values = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        values[key] = parse_value(key, value)
    return values


def resolve(file: str | os.PathLike | None = None, flags: dict[str, str] | None = None,
            env: dict[str, str] | None = None) -> RunConfig:
    """Merge defaults < file < ``SIMSID_SEED`` < flags into a :class:`RunConfig`."""
    env = os.environ if env is None else env
    values = {}
    if file:
        values.update(read_config_file(file))
    if env.get(SEED_ENV, "").strip():
        values["seed"] = parse_value("seed", env[SEED_ENV])
    for key, text in (flags or {}).items():
        key = key.replace("-", "_")
        values[key] = parse_value(key, text)
    return RunConfig(**values)
