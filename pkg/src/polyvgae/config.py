"""Flat ``key = value`` run configuration.

Keys name fields of :class:`ModelConfig`, :class:`TaskConfig` or the split
settings; ``lambda.<node type>`` sets a per-type KL weight.  Values given
later (command-line flags) override earlier ones (file), which override the
task preset.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .errors import ConfigError
from .model import ModelConfig
from .train import TASK_PRESETS, TaskConfig

SPLIT_KEYS = {"ratios": (0.8, 0.1, 0.1), "message_fraction": 0.8, "fingerprint_width": 2048, "fingerprint_radius": 2}


def read_config(path) -> dict[str, str]:
    values = {}
    path = Path(path)
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    if key == "logsigma_init" and value.lower() == "none":
        return None
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v for v in value.replace(":", ",").split(",") if v.strip()]
            kind = type(default[0]) if default else int
            return tuple(kind(v) for v in items)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {value!r}") from None
    return value


@dataclass
class RunConfig:
    model: ModelConfig
    task: TaskConfig
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    message_fraction: float = 0.8
    fingerprint_width: int = 2048
    fingerprint_radius: int = 2

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "task": self.task.to_dict(),
            "split": {
                "ratios": list(self.ratios),
                "message_fraction": self.message_fraction,
                "fingerprint_width": self.fingerprint_width,
                "fingerprint_radius": self.fingerprint_radius,
            },
        }


def resolve(*layers: Mapping[str, object]) -> RunConfig:
    """Merge value layers (later wins) on top of the chosen task preset."""
    merged: dict[str, object] = {}
    for layer in layers:
        merged.update({k: v for k, v in layer.items() if v is not None})
    task_name = str(merged.get("task", "polypharmacy"))
    if task_name not in TASK_PRESETS:
        raise ConfigError(f"task must be one of {tuple(TASK_PRESETS)}, got {task_name!r}")
    preset = TASK_PRESETS[task_name]
    model_kw = dict(preset["model"])
    task_kw = dict(preset["task"], task=task_name)
    split_kw = {}
    lambdas = {}
    model_defaults = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
    task_defaults = {f.name: f.default for f in dataclasses.fields(TaskConfig) if f.name != "lambdas"}
    for key, value in merged.items():
        if key.startswith("lambda."):
            lambdas[key[len("lambda."):]] = _coerce(key, value, 0.0)
        elif key in model_defaults:
            model_kw[key] = _coerce(key, value, model_defaults[key])
        elif key in task_defaults:
            task_kw[key] = _coerce(key, value, task_defaults[key])
        elif key in SPLIT_KEYS:
            split_kw[key] = _coerce(key, value, SPLIT_KEYS[key])
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    task = TaskConfig(**task_kw)
    task.lambdas = lambdas
    model = ModelConfig.from_dict(model_kw)
    model.validate()
    task.validate()
    run = RunConfig(model, task, **split_kw)
    if len(run.ratios) != 3:
        raise ConfigError("ratios needs three values: train, val, test")
    return run


def run_config_from_dict(d: Mapping) -> RunConfig:
    split = d.get("split", {})
    return RunConfig(
        ModelConfig.from_dict(d["model"]),
        TaskConfig.from_dict(d["task"]),
        tuple(split.get("ratios", SPLIT_KEYS["ratios"])),
        split.get("message_fraction", SPLIT_KEYS["message_fraction"]),
        split.get("fingerprint_width", SPLIT_KEYS["fingerprint_width"]),
        split.get("fingerprint_radius", SPLIT_KEYS["fingerprint_radius"]),
    )
