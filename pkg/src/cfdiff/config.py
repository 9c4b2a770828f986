"""Experiment configuration: strict JSON with a versioned ``schema`` field.

Unknown keys are rejected at every level so a typo in a preset cannot
silently fall back to a default.

Random streams used by the harness (``s`` is the master seed, ``c`` the
classifier seed):

* classifier training set ``[c, 0]``, held-out set ``[c, 1]``, input jitter ``[c, 2]``
* factual sample ``[s, 1]``, target draw for episode ``i`` ``[s, 2, i]``
* Frechet reference sample ``[s, 3]``
* abduction/DDIM noise for episode ``i``: ``engine.derive_seed(s, i)``
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidArgument
from .guidance import GuidanceConfig, get_preset

SCHEMA_VERSION = 1


@dataclass
class CodecSpec:
    ambient_dim: int = 8
    latent_dim: int = 2
    seed: int = 0
    identity: bool = False


@dataclass
class ClassifierSpec:
    type: str = "linear"
    hidden: int = 64
    epochs: int = 50
    lr: float = 0.1
    batch: int = 32
    n_train: int = 2000
    train_noise: float = 0.0
    seed: int = 0
    checkpoint: str | None = None


@dataclass
class ScheduleSpec:
    kind: str = "linear-beta"
    base_steps: int = 1000
    respace_factor: int = 2
    ddim_eta: float = 0.0


@dataclass
class TargetSpec:
    mode: str = "posterior-topk"
    k: int = 1
    fixed_class: int | None = None


@dataclass
class ExperimentConfig:
    schema: int = SCHEMA_VERSION
    world: str = "two-moons-gauss"
    codec: CodecSpec = field(default_factory=CodecSpec)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    guidance: str | dict = "desk-moons"
    t_start_fraction: float = 0.5
    target: TargetSpec = field(default_factory=TargetSpec)
    n: int = 200
    seed: int = 0
    out: str = "runs/default"
    record_trajectories: bool = False
    emit_plots: bool = False

    def __post_init__(self):
        if self.schema != SCHEMA_VERSION:
            raise InvalidArgument(f"unsupported config schema {self.schema}; expected {SCHEMA_VERSION}")
        if self.n < 1:
            raise InvalidArgument("n must be >= 1")
        self.guidance_config()  # fail early on a bad preset name or inline block

    def guidance_config(self) -> GuidanceConfig:
        if isinstance(self.guidance, str):
            return get_preset(self.guidance)
        return GuidanceConfig.from_dict(self.guidance)

    def to_dict(self) -> dict:
        return asdict(self)


_NESTED = {"codec": CodecSpec, "classifier": ClassifierSpec, "schedule": ScheduleSpec, "target": TargetSpec}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise InvalidArgument(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidArgument(f"unknown keys in {where}: {unknown}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    if "schema" not in data:
        raise InvalidArgument("config is missing the 'schema' field")
    for key, cls in _NESTED.items():
        if key in data:
            data[key] = _build(cls, data[key], key)
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
