"""Training configuration and the key-value run-config file format.

Run-config files hold one ``key = value`` per line; ``#`` starts a comment and
blank lines are ignored. Keys are the field names of :class:`ModelConfig` and
:class:`TrainConfig` (disjoint sets), for example::

    # toy expert-choice run
    num_layers = 4
    num_experts = 4
    routing_mode = expert_choice
    total_steps = 2000
    learning_rate = 0.001
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..dit.model import ModelConfig
from .checkpoint import parse_value


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    total_steps: int = 2000
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    mask_ratio: float = 0.5
    group_size_train: int = 128
    group_size_infer: int = 128
    seed: int = 0
    rms_decay: float = 0.9
    momentum: float = 0.9
    eps: float = 1e-8
    aux_loss_coef: float = 0.01
    mu_t: float = 0.0
    sigma_t: float = 1.0
    checkpoint_every: int = 500
    dataset_size: int = 4096
    log_every: int = 100

    def problems(self) -> list[str]:
        out = []
        for name in ("batch_size", "group_size_train", "group_size_infer", "dataset_size"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.total_steps < 0:
            out.append("total_steps must be >= 0")
        if not 0 <= self.mask_ratio < 1:
            out.append(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            out.append(f"warmup_steps must be in [0, total_steps={self.total_steps}], got {self.warmup_steps}")
        if self.learning_rate < 0:
            out.append("learning_rate must be >= 0")
        if not 0 <= self.rms_decay < 1:
            out.append("rms_decay must be in [0, 1)")
        if not 0 <= self.momentum < 1:
            out.append("momentum must be in [0, 1)")
        if self.eps <= 0:
            out.append("eps must be > 0")
        if self.sigma_t <= 0:
            out.append("sigma_t must be > 0")
        if self.aux_loss_coef < 0:
            out.append("aux_loss_coef must be >= 0")
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))
        self.problems = problems


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError([f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}"])
        values[key.strip()] = parse_value(value)
    return values


def _coerce(name: str, value, field: dataclasses.Field, problems: list[str]):
    typ = str(field.type)
    if value is None:
        if "None" in typ:
            return None
        problems.append(f"{name}: value required")
        return field.default
    if typ.startswith("int"):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            problems.append(f"{name}: expected an integer, got {value!r}")
            return field.default
        return value
    if typ.startswith("float"):
        if not isinstance(value, (int, float)):
            problems.append(f"{name}: expected a number, got {value!r}")
            return field.default
        return float(value)
    return str(value)


def build_configs(values: dict, source: str = "<config>") -> tuple[ModelConfig, TrainConfig]:
    """Split a flat key-value mapping into validated model and training configs."""
    problems: list[str] = []
    model_kw, train_kw = {}, {}
    for key, value in values.items():
        if key in _MODEL_FIELDS:
            model_kw[key] = _coerce(key, value, _MODEL_FIELDS[key], problems)
        elif key in _TRAIN_FIELDS:
            train_kw[key] = _coerce(key, value, _TRAIN_FIELDS[key], problems)
        else:
            problems.append(f"{key}: unknown key in {source}")
    if problems:
        raise ConfigError(problems)
    train = TrainConfig(**train_kw)
    problems += train.problems()
    try:
        model = ModelConfig(**model_kw)
    except ValueError as err:
        problems.append(str(err))
        model = None
    if problems:
        raise ConfigError(problems)
    return model, train


def load_config(path=None, overrides: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    values = {}
    source = "<defaults>"
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file not found: {path}"])
        source = str(path)
        values = parse_config_text(path.read_text(), source)
    values.update(overrides or {})
    return build_configs(values, source)


def dump_config(model: ModelConfig, train: TrainConfig) -> str:
    lines = ["# model"]
    lines += [f"{k} = {'none' if v is None else v}" for k, v in model.to_dict().items()]
    lines.append("# training")
    lines += [f"{k} = {v}" for k, v in train.to_dict().items()]
    return "\n".join(lines) + "\n"
