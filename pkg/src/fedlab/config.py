"""Experiment configuration: TOML in, validated dataclasses out.

Unknown sections or keys are errors. Every field has a default, so an empty
file is a valid (FedeCouple, synthetic, pathological) experiment.
"""

from __future__ import annotations

import copy
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from .data import PartitionSpec
from .errors import ConfigError
from .fedcore import ALGORITHMS, TOGGLES, Hyperparams
from .server import SCHEMES

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class DataConfig:
    source: str = "synthetic"
    classes: int = 10
    dim: int = 32
    per_class: int = 200
    spread: float = 0.5
    images: str = ""
    labels: str = ""

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"data.source must be 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "idx" and not (self.images and self.labels):
            raise ConfigError("data.source = 'idx' needs data.images and data.labels")


@dataclass
class ModelConfig:
    hidden_dims: list[int] = field(default_factory=lambda: [128, 128])
    feature_dim: int = 128
    leaky_slope: float = 0.01


@dataclass
class PartitionConfig:
    kind: str = "pathological"
    classes_per_client: int = 3
    s_percent: float = 20.0
    samples_per_client: int = 600
    dominant_classes: int = 2
    beta: float = 0.5

    def spec(self, num_clients: int, seed: int) -> PartitionSpec:
        return PartitionSpec(
            kind=self.kind,
            num_clients=num_clients,
            seed=seed,
            s_percent=self.s_percent,
            samples_per_client=self.samples_per_client,
            dominant_classes=self.dominant_classes,
            classes_per_client=self.classes_per_client,
            beta=self.beta,
        )


@dataclass
class ExperimentConfig:
    algorithm: str = "fedecouple"
    rounds: int = 200
    num_clients: int = 20
    participation: Any = 1.0
    scheme: str = "auto"
    seed: int = 0
    repeats: int = 1
    out_dir: str = "runs/default"
    save_models: bool = False
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    hyper: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.rounds < 1 or self.num_clients < 1 or self.repeats < 1:
            raise ConfigError("rounds, num_clients and repeats must be >= 1")
        if self.scheme != "auto" and self.scheme not in SCHEMES:
            raise ConfigError(f"unknown aggregation scheme {self.scheme!r}")
        p = self.participation
        if isinstance(p, (list, tuple)):
            if len(p) != 2 or not 0 < p[0] <= p[1] <= 1:
                raise ConfigError(f"participation range must be [lo, hi] with 0 < lo <= hi <= 1, got {p}")
            self.participation = [float(p[0]), float(p[1])]
        elif not 0 < float(p) <= 1:
            raise ConfigError(f"participation must lie in (0, 1], got {p}")
        else:
            self.participation = float(p)
        # Validates the partition parameters early.
        self.partition.spec(self.num_clients, self.seed)

    @property
    def rho(self):
        p = self.participation
        return tuple(p) if isinstance(p, list) else p

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(copy.deepcopy(self), seed=seed)


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "partition": PartitionConfig, "hyper": Hyperparams}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    top = doc.pop("experiment", {})
    if not isinstance(top, dict):
        raise ConfigError("[experiment] must be a table")
    # run.json snapshots are flat at the top level.
    for key in list(doc):
        if key not in _SECTIONS:
            top[key] = doc.pop(key)
    sections = {}
    for name, cls in _SECTIONS.items():
        values = doc.get(name, {})
        if not isinstance(values, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build(cls, values, name)
    known = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = sorted(set(top) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [experiment]: {', '.join(unknown)}")
    return ExperimentConfig(**top, **sections)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc)


def apply_overrides(
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
    algorithm: Optional[str] = None,
    rounds: Optional[int] = None,
    toggles: Optional[list[str]] = None,
) -> ExperimentConfig:
    """Apply command-line overrides; toggles look like ``gfa=off``."""
    doc = cfg.to_dict()
    if seed is not None:
        doc["seed"] = seed
    if out_dir is not None:
        doc["out_dir"] = out_dir
    if algorithm is not None:
        doc["algorithm"] = algorithm
    if rounds is not None:
        doc["rounds"] = rounds
    for item in toggles or []:
        name, sep, value = item.partition("=")
        if not sep or name not in TOGGLES or value not in ("on", "off"):
            raise ConfigError(f"bad toggle {item!r}; expected one of {TOGGLES} as name=on|off")
        doc["hyper"][name] = value == "on"
    return config_from_dict(doc)
