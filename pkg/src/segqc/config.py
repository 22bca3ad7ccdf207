"""JSON run configuration. Unknown keys anywhere are rejected.

A config file has up to six sections; any omitted section takes the
reference desk defaults below::

    {"gen": {...}, "experiment": {...}, "seeds": {...},
     "arch": {...}, "train": {...}, "rca": {...}}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ConfigError
from .nnet.model import ArchSpec
from .nnet.train import TrainConfig


@dataclass
class GenConfig:
    n_cases: int = 320
    ladder: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])
    seed: int = 0
    dims: list = field(default_factory=lambda: [32, 32, 8])
    require_coverage: bool = True


@dataclass
class Seeds:
    balance: int = 0
    split: int = 1
    init: int = 2
    train: int = 3


@dataclass
class ExperimentSection:
    id: int = 1
    manifest: str = "data/manifest.csv"
    rca_manifest: str | None = None      # pre-labelled manifest for experiment 2
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    threshold: float = 0.7
    norm_mode: str = "per_volume"
    label_source: str = "auto"            # auto: true DSC for exp 1, RCA for exp 2
    inject_oracle: bool = False           # harness self-test: predictions := truths
    timing_cases: int = 20


@dataclass
class RcaConfig:
    k: int = 100
    seed: int = 1000
    search_radius: list = field(default_factory=lambda: [4, 4, 1])


def _desk_train() -> TrainConfig:
    return TrainConfig(epochs=8, batch_size=46, lr0=2e-3, decay=0.005, decay_mode="lr")


@dataclass
class ExperimentConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    seeds: Seeds = field(default_factory=Seeds)
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: TrainConfig = field(default_factory=_desk_train)
    rca: RcaConfig = field(default_factory=RcaConfig)

    def validate(self) -> "ExperimentConfig":
        e = self.experiment
        if e.id not in (1, 2):
            raise ConfigError(f"experiment id must be 1 or 2, got {e.id}")
        if len(e.split) != 3 or min(e.split) < 0 or abs(sum(e.split) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negatives summing to 1, got {e.split}")
        if not 0.0 < e.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {e.threshold}")
        if e.norm_mode not in ("per_volume", "global"):
            raise ConfigError(f"unknown norm_mode {e.norm_mode!r}")
        if e.label_source not in ("auto", "true", "rca"):
            raise ConfigError(f"unknown label_source {e.label_source!r}")
        if self.train.decay_mode not in ("lr", "weight"):
            raise ConfigError(f"unknown decay_mode {self.train.decay_mode!r}")
        if self.train.epochs < 0 or self.train.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.rca.k < 1:
            raise ConfigError("rca.k must be >= 1")
        if tuple(self.arch.input_dims) != tuple(self.gen.dims):
            raise ConfigError(f"arch.input_dims {self.arch.input_dims} != gen.dims {self.gen.dims}")
        self.arch.validate()
        return self

    def label_source(self) -> str:
        src = self.experiment.label_source
        if src == "auto":
            return "true" if self.experiment.id == 1 else "rca"
        return src

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if isinstance(v, ArchSpec) else asdict(v)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    if cls is ArchSpec:
        try:
            return ArchSpec.from_dict(data)
        except TypeError as e:
            raise ConfigError(f"{where}: {e}") from e
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    default = cls()
    for k, v in data.items():
        current = getattr(default, k)
        if is_dataclass(current):
            kwargs[k] = _build(type(current), v, f"{where}.{k}")
        else:
            kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return config_from_dict(data)
