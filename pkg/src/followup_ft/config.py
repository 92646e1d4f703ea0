"""Run configuration: TOML (or JSON) files mapped onto typed sections."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .network import NetworkConfig
from .phantom import PhantomConfig
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

N_SLICES = ("1", "2", "all")
POOLS = ("all_organ_slices", "lesion_slices")
WEIGHTINGS = ("none", "detection", "segmentation")
TASKS = ("detection", "segmentation")


def _section(cls, name, d):
    if not isinstance(d, dict):
        raise ConfigError(f"{name}: expected a table")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _choice(section: str, name: str, value, allowed):
    if str(value) not in allowed:
        raise ConfigError(f"{section}.{name}: {value!r} not in {list(allowed)}")


@dataclass
class CohortSection:
    n_train: int = 10
    n_test: int = 10


@dataclass
class AdaptationSection:
    n_slices: str = "all"
    pool: str = "lesion_slices"
    weighting: str = "none"

    def validate(self):
        self.n_slices = str(self.n_slices)
        _choice("adaptation", "n_slices", self.n_slices, N_SLICES)
        _choice("adaptation", "pool", self.pool, POOLS)
        _choice("adaptation", "weighting", self.weighting, WEIGHTINGS)


@dataclass
class PostprocessSection:
    task: str = "detection"

    def validate(self):
        _choice("postprocess", "task", self.task, TASKS)


@dataclass
class UncertaintySection:
    n_repeats: int = 25
    task: str = "detection"

    def validate(self):
        if int(self.n_repeats) < 2:
            raise ConfigError("uncertainty.n_repeats: must be >= 2")
        _choice("uncertainty", "task", self.task, TASKS)


@dataclass
class InferenceSection:
    tile: Optional[int] = None


@dataclass
class PathsSection:
    data: str = "data"
    checkpoints: str = "checkpoints"
    output: str = "output"


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    cohort: CohortSection = field(default_factory=CohortSection)
    adaptation: AdaptationSection = field(default_factory=AdaptationSection)
    postprocess: PostprocessSection = field(default_factory=PostprocessSection)
    uncertainty: UncertaintySection = field(default_factory=UncertaintySection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    paths: PathsSection = field(default_factory=PathsSection)

    SECTIONS = {
        "network": NetworkConfig,
        "training": TrainConfig,
        "phantom": PhantomConfig,
        "cohort": CohortSection,
        "adaptation": AdaptationSection,
        "postprocess": PostprocessSection,
        "uncertainty": UncertaintySection,
        "inference": InferenceSection,
        "paths": PathsSection,
    }

    def validate(self) -> "RunConfig":
        self.network.validate()
        self.training.validate()
        self.phantom.validate()
        for sec in (self.adaptation, self.postprocess, self.uncertainty):
            sec.validate()
        if self.cohort.n_train < 1 or self.cohort.n_test < 1:
            raise ConfigError("cohort: n_train and n_test must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict, base: Optional["RunConfig"] = None) -> "RunConfig":
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section(s) {sorted(unknown)}")
        base = base or cls()
        kwargs = {}
        for name, sec_cls in cls.SECTIONS.items():
            merged = _as_dict(getattr(base, name))
            merged.update(d.get(name, {}) or {})
            kwargs[name] = _section(sec_cls, name, merged)
        return cls(**kwargs).validate()

    def to_dict(self) -> dict:
        return {name: _as_dict(getattr(self, name)) for name in self.SECTIONS}


def _as_dict(section) -> dict:
    if hasattr(section, "to_dict"):
        return section.to_dict()
    return asdict(section)


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    """Read a ``.toml`` or ``.json`` run configuration, filling unspecified fields from ``base``."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        d = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig.from_dict(d, base)


def desk_config() -> RunConfig:
    """Desk-scale preset used by the phantom reproduction (reduced width, short training)."""
    return RunConfig.from_dict(
        {
            "network": {"in_channels_a": 2, "in_channels_b": 1, "n_kernels": 16},
            "training": {"iterations": 1500, "patch_size": 64, "seed": 7},
            "cohort": {"n_train": 10, "n_test": 10},
        }
    )
