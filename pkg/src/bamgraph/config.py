"""Run configuration: JSON file plus command-line overrides over table defaults."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .bamnet import ModelConfig
from .errors import InvalidParameterError
from .trainer import TrainConfig

STAGES = ("bamnet", "cpdag")


def stage_defaults(stage: str) -> dict:
    if stage == "cpdag":
        return {"epochs": 1000, "samples_per_epoch": 1, "initial_lr": 0.0005, "lr_decay": 0.1 ** (1 / 1000)}
    return {}


@dataclass
class RunConfig:
    stage: str = "bamnet"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def seed(self) -> int:
        return self.train.seed


def _coerce(value, current):
    if isinstance(current, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(json.loads(value)) if isinstance(value, str) else tuple(value)
    return value


def build_run_config(path=None, stage="bamnet", overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional JSON file and ``{"model.C": 32, "epochs": 2}``-style overrides.

    Raises :class:`InvalidParameterError` naming the offending key before any work starts.
    """
    if stage not in STAGES:
        raise InvalidParameterError(f"stage must be one of {STAGES}, got {stage!r}")
    raw = json.loads(Path(path).read_text()) if path else {}
    model_kw = dict(raw.get("model", {}))
    train_kw = {k: v for k, v in raw.items() if k not in ("model", "stage")}
    train_kw = {**stage_defaults(stage), **train_kw}
    model_kw.setdefault("precision", os.environ.get("BAM_PRECISION", "f64"))

    model_names = {f.name for f in fields(ModelConfig)}
    train_names = {f.name for f in fields(TrainConfig)} - {"model"}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        name = key.split(".", 1)[-1]
        if key.startswith("model.") or (name in model_names and name not in train_names):
            if name not in model_names:
                raise InvalidParameterError(f"unknown model field {key!r}")
            model_kw[name] = value
        elif name in train_names:
            train_kw[name] = value
        else:
            raise InvalidParameterError(f"unknown config field {key!r}")
    for k in model_kw:
        if k not in model_names:
            raise InvalidParameterError(f"unknown model field {k!r}")
    for k in train_kw:
        if k not in train_names:
            raise InvalidParameterError(f"unknown config field {k!r}")

    mdefault, tdefault = ModelConfig(), TrainConfig()
    model_kw = {k: _coerce(v, getattr(mdefault, k)) for k, v in model_kw.items()}
    train_kw = {k: _coerce(v, getattr(tdefault, k)) for k, v in train_kw.items()}
    try:
        model = ModelConfig(**model_kw)
        train = TrainConfig(model=model, **train_kw)
    except (TypeError, ValueError) as exc:
        raise InvalidParameterError(str(exc)) from exc
    return RunConfig(stage, model, train)
