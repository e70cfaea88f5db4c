"""Run configuration: one YAML file covering every module."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np
import yaml

from .metrics import DEFAULT_PEAK
from .mlem import MlemConfig
from .neural.train import ModelConfig, TrainConfig
from .neural.unet import variant
from .phantom import PhantomConfig
from .scatter_op import ScatterConfig
from .simulator import BeamConfig, ConfigurationError, DetectorConfig, Geometry


@dataclass(frozen=True)
class DatasetConfig:
    train: int = 512
    val: int = 64
    test: int = 64
    dosage: int = 1024

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or self.dosage < 1:
            raise ConfigurationError("split sizes must be >= 0 and dosage >= 1")

    @property
    def total(self) -> int:
        return self.train + self.val + self.test

    def split(self, name: str) -> range:
        a = {"train": 0, "val": self.train, "test": self.train + self.val}[name]
        return range(a, a + getattr(self, name))


@dataclass(frozen=True)
class ScatterSection:
    point_size: int = 1
    channels: int = 8
    threshold: float = 2e-3
    hidden: int = 32


@dataclass(frozen=True)
class ModelSection:
    variant: str = "nano"
    kernel_size: int = 3


@dataclass(frozen=True)
class PocaSection:
    threshold: float = 2e-3


@dataclass(frozen=True)
class MetricsSection:
    peak: float = DEFAULT_PEAK

    def __post_init__(self):
        if not self.peak > 0:
            raise ConfigurationError("metrics.peak must be positive")


@dataclass(frozen=True)
class RunConfig:
    """Full-scale runs use 20000/1600/1600 samples at resolution 64; the
    defaults here are desk scale."""

    seed: int = 0
    geometry: Geometry = Geometry()
    beam: BeamConfig = BeamConfig()
    detector: DetectorConfig = DetectorConfig()
    phantom: PhantomConfig = PhantomConfig()
    dataset: DatasetConfig = DatasetConfig()
    scatter: ScatterSection = ScatterSection()
    model: ModelSection = ModelSection()
    train: TrainConfig = TrainConfig()
    mlem: MlemConfig = MlemConfig()
    poca: PocaSection = PocaSection()
    metrics: MetricsSection = MetricsSection()

    def __post_init__(self):
        if self.geometry.object_side != self.phantom.extent:
            raise ConfigurationError("phantom.extent must equal geometry.object_side")
        if self.phantom.resolution % self.mlem.resolution:
            raise ConfigurationError("mlem.resolution must divide phantom.resolution")

    @property
    def resolution(self) -> int:
        return self.phantom.resolution

    def model_config(self) -> ModelConfig:
        s = self.scatter
        sc = ScatterConfig(self.resolution, s.point_size, s.channels, s.threshold,
                           seed=self.seed, hidden=s.hidden)
        unet = variant(self.model.variant, in_channels=s.channels, kernel_size=self.model.kernel_size)
        return ModelConfig(sc, unet)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def with_overrides(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigurationError(f"unknown config key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, f"{path}{name}.")
        elif isinstance(default, float) and isinstance(value, (int, str)) and not isinstance(value, bool):
            # YAML 1.1 reads "1e-3" as a string
            try:
                kwargs[name] = float(value)
            except ValueError:
                raise ConfigurationError(f"{path}{name}: expected a number, got {value!r}") from None
        elif isinstance(default, bool) or isinstance(default, str):
            if type(value) is not type(default):
                raise ConfigurationError(f"{path}{name}: expected {type(default).__name__}, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, int):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigurationError(f"{path}{name}: expected an integer, got {value!r}")
            kwargs[name] = value
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError(f"{path}{name}: expected a list, got {value!r}")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"{path or 'config'}: {e}") from None


def load_config(path=None, text: str | None = None) -> RunConfig:
    """Read a YAML run config; missing keys take defaults, unknown keys are rejected."""
    if path is None and text is None:
        return RunConfig()
    if text is None:
        with open(path) as f:
            text = f.read()
    data = yaml.safe_load(text) or {}
    return _build(RunConfig, data, "")


def sample_seeds(seed: int, index: int) -> tuple[int, int]:
    """Independent ``(phantom_seed, event_seed)`` for dataset sample ``index``."""
    a, b = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, np.uint32)
    return int(a), int(b)


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.dump().encode()).hexdigest()[:16]
