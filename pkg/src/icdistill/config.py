"""Experiment configuration: one JSON document with a fixed set of sections."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .distill import IcdConfig
from .model import PfnConfig
from .prior import PriorConfig


class ConfigError(ValueError):
    pass


@dataclass
class MetaTrainSection:
    steps: int = 20000
    lr: float = 3e-4
    split_ratio: float = 0.7
    window: int = 500


@dataclass
class IcdSection:
    m: int = 1000
    steps: int = 2000
    lr: float = 1e-2
    batch_size: int = 512
    eval_interval: int = 25
    early_stop_patience: int = 20


@dataclass
class DataSection:
    label_column: str = "label"
    categorical_columns: list = field(default_factory=list)
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    stratified: bool = True
    moons_n: int = 2000
    moons_noise: float = 0.1


@dataclass
class EvalSection:
    baseline_repeats: int = 20
    grid_resolution: int = 100
    grid_steps: list = field(default_factory=lambda: [0, 100, 200, 400])


_SECTIONS = {
    "prior": PriorConfig,
    "model": PfnConfig,
    "meta_train": MetaTrainSection,
    "icd": IcdSection,
    "data": DataSection,
    "eval": EvalSection,
}


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


@dataclass
class ExperimentConfig:
    prior: PriorConfig = field(default_factory=PriorConfig)
    model: PfnConfig = field(default_factory=PfnConfig)
    meta_train: MetaTrainSection = field(default_factory=MetaTrainSection)
    icd: IcdSection = field(default_factory=IcdSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        kwargs = {name: _build(c, doc.get(name, {}), name) for name, c in _SECTIONS.items()}
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        return cls(seed=seed, **kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        out["prior"] = self.prior.to_dict()
        out["seed"] = self.seed
        return out

    def icd_config(self) -> IcdConfig:
        return IcdConfig(seed=self.seed, **dataclasses.asdict(self.icd))
