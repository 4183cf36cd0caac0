"""Dataclass configs with strict JSON loading.

Unknown keys and duplicate keys are errors; absent keys take the dataclass
default. ``resolved_dict`` is the echo written next to every result, and it
loads back to an equal config.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass
from pathlib import Path

from .errors import SteinError


class ParseError(SteinError, ValueError):
    pass


class UnknownKey(ParseError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 5.0
    lambda_max: float = 1.0
    gamma: float = 10.0
    warmup_epochs: int = 1
    target_budget: int = 32
    target_percent: float = 0.01
    form: str = "kernelized"
    score: str = "gaussian"
    kernel: str = "rbf"
    bandwidth: float = 1.0
    hidden_dim: int = 16
    bottleneck_dim: int = 16
    feature_activation: str = "tanh"
    classes: int = 2
    buffer_size: int = 512
    score_ridge: float = 0.1
    gmm_k: int = 4
    gmm_lr: float = 0.01
    vae_latent_dim: int = 4
    vae_hidden_dim: int = 32
    vae_lr: float = 0.01
    vae_samples: int = 8
    critic_hidden_dim: int = 32
    critic_lr: float = 0.01
    critic_momentum: float = 0.0
    critic_weight_decay: float = 1e-3
    ascent_steps: int = 5
    score_update_every: int = 1
    data: typing.Optional[str] = None
    target_test: typing.Optional[str] = None

    def __post_init__(self):
        positive = ("lr", "clip_norm", "gamma", "bandwidth", "gmm_lr", "vae_lr", "critic_lr")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ParseError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ParseError("batch_size must be at least 2")
        if self.target_budget < 2:
            raise ParseError("target_budget must be at least 2")
        if not 0 < self.target_percent <= 1:
            raise ParseError("target_percent must lie in (0, 1]")
        if self.score_ridge < 0:
            raise ParseError("score_ridge must be non-negative")
        if self.lambda_max < 0:
            raise ParseError("lambda_max must be non-negative")
        if self.form not in ("kernelized", "adversarial", "erm"):
            raise ParseError(f"unknown form {self.form!r}")
        if self.score not in ("gaussian", "gmm", "vae"):
            raise ParseError(f"unknown score family {self.score!r}")
        if self.feature_activation not in ("tanh", "relu", "identity"):
            raise ParseError(f"unknown feature activation {self.feature_activation!r}")
        if self.kernel not in ("rbf", "imq"):
            raise ParseError(f"unknown kernel {self.kernel!r}")


@dataclass
class KsdConfig:
    data: typing.Optional[str] = None
    model: typing.Optional[str] = None
    domain: str = "source"
    kernel: str = "rbf"
    bandwidth: float = 1.0
    reg_lambda: typing.Optional[float] = None
    seed: int = 0


@dataclass
class DiagConfig:
    dim: int = 2
    n: int = 5000
    seeds: int = 10
    score: str = "gaussian"
    gmm_k: int = 3
    shift: float = 0.0
    kernel: str = "rbf"
    bandwidth: float = 1.0
    seed: int = 0


@dataclass
class TwoSampleConfig:
    data: typing.Optional[str] = None
    score: str = "gaussian"
    gmm_k: int = 4
    alpha: float = 0.05
    null_draws: int = 99
    kernel: str = "rbf"
    bandwidth: float = 1.0
    seed: int = 0


@dataclass
class RateConfig:
    p_mean: float = 0.5
    p_var: float = 1.0
    q_mean: float = 0.0
    q_var: float = 1.0
    n_grid: typing.List[int] = dataclasses.field(default_factory=lambda: [50, 100, 200, 400, 800, 1600])
    m_grid: typing.List[int] = dataclasses.field(default_factory=lambda: [32, 64, 128, 256, 512, 1024])
    reps: int = 50
    n_phase2: int = 2000
    kernel: str = "rbf"
    bandwidth: float = 1.0
    seed: int = 0


@dataclass
class SweepConfig:
    d: int = 1
    n: int = 1000
    m_grid: typing.List[int] = dataclasses.field(default_factory=lambda: [32, 50, 100, 200])
    trials: int = 100
    alpha: float = 0.05
    shift: float = 0.5
    null_draws: int = 99
    permutations: int = 200
    kernel: str = "rbf"
    bandwidth: float = 1.0
    seed: int = 0


@dataclass
class GenConfig:
    dataset: str = "two-moons"
    n: int = 2000
    n_target: typing.Optional[int] = None
    noise: float = 0.1
    rotation: float = 30.0
    d: int = 2
    shift: float = 1.0
    cov_scale: float = 1.0
    classes: int = 2
    seed: int = 0


@dataclass
class EvalConfig:
    model: typing.Optional[str] = None
    data: typing.Optional[str] = None
    domain: str = "target"
    seed: int = 0


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ParseError(f"duplicate key {key!r}")
        out[key] = value
    return out


def parse_json_strict(text: str, source: str = "<config>") -> dict:
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: top level must be a JSON object")
    return doc


def _coerce(name, tp, value):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(name, args[0], value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ParseError(f"field {name!r}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ParseError(f"field {name!r}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(f"field {name!r}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ParseError(f"field {name!r}: expected a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ParseError(f"field {name!r}: expected a list, got {value!r}")
        (inner,) = typing.get_args(tp)
        return [_coerce(name, inner, v) for v in value]
    return value


def from_dict(cls, doc: dict, source: str = "<config>"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise UnknownKey(f"{source}: unknown key(s) {', '.join(map(repr, unknown))}")
    kwargs = {k: _coerce(k, hints[k], v) for k, v in doc.items()}
    return cls(**kwargs)


def load_config(path, cls=TrainConfig):
    path = Path(path)
    return from_dict(cls, parse_json_strict(path.read_text(encoding="utf-8"), str(path)), str(path))


def resolved_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
