"""Run configuration: every stage's settings in one YAML document."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..aggregation import LNConfig
from ..classifier import ClassifierConfig
from ..detector import AnchorSpec, DetectorConfig
from ..stain import StainConfig
from ..synth import CohortSpec, SynthSpec


class ConfigError(ValueError):
    pass


@dataclass
class AugmentConfig:
    circlemix_count: int = 300
    oversample: bool = True

    def validate(self) -> "AugmentConfig":
        if self.circlemix_count < 0:
            raise ValueError("circlemix_count must be >= 0")
        return self


@dataclass
class SynthConfig:
    """Cohort shape used by ``synth``; slide geometry mirrors :class:`SynthSpec`."""

    patients_per_ln_class: int = 10
    glomeruli_per_patient: tuple[int, int] = (8, 16)
    second_label_prob: float = 0.2
    slide_size: tuple[int, int] = (1024, 512)
    glomeruli_per_slide: tuple[int, int] = (6, 10)
    radius_range: tuple[float, float] = (36.0, 60.0)
    stain_jitter: float = 0.04
    seed: int = 0

    def cohort_spec(self, render: bool = True) -> CohortSpec:
        synth = SynthSpec(slide_size=tuple(self.slide_size), glomeruli_per_slide=tuple(self.glomeruli_per_slide),
                          radius_range=tuple(self.radius_range), stain_jitter=self.stain_jitter, seed=self.seed)
        return CohortSpec(patients_per_ln_class=self.patients_per_ln_class,
                          glomeruli_per_patient=tuple(self.glomeruli_per_patient),
                          second_label_prob=self.second_label_prob, render=render, synth=synth, seed=self.seed)

    def validate(self) -> "SynthConfig":
        self.cohort_spec().validate()
        return self


SECTIONS = {
    "detector": DetectorConfig,
    "classifier": ClassifierConfig,
    "ln": LNConfig,
    "stain": StainConfig,
    "augment": AugmentConfig,
    "synth": SynthConfig,
}


@dataclass
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    ln: LNConfig = field(default_factory=LNConfig)
    stain: StainConfig = field(default_factory=StainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: tuple[float, float, float] = (0.6, 0.0, 0.4)
    seed: int = 0
    artifacts_dir: str = "artifacts"

    def validate(self) -> "RunConfig":
        try:
            for name in SECTIONS:
                getattr(self, name).validate()
        except ValueError as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split fractions must be three non-negative numbers summing to 1")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the master seed changed and every stage seed re-derived from it."""
        cfg = from_dict(to_dict(self))
        cfg.seed = int(seed)
        for k, name in enumerate(("synth", "stain", "detector", "classifier", "ln"), start=1):
            getattr(cfg, name).seed = int(seed) * 1000 + k
        return cfg

    def artifact_path(self, kind: str) -> Path:
        return Path(self.artifacts_dir) / f"{kind}.npz"


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {where} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        default = getattr(cls(), k) if cls is not RunConfig else None
        if k == "anchors" and cls is DetectorConfig:
            v = _build(AnchorSpec, v, f"{where}.anchors")
        elif isinstance(v, list):
            v = tuple(v)
        elif isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    unknown = set(d) - set(SECTIONS) - {"split", "seed", "artifacts_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kw = {name: _build(cls, d.get(name, {}) or {}, name) for name, cls in SECTIONS.items()}
    if "split" in d:
        kw["split"] = tuple(float(x) for x in d["split"])
    if "seed" in d:
        kw["seed"] = int(d["seed"])
    if "artifacts_dir" in d:
        kw["artifacts_dir"] = str(d["artifacts_dir"])
    return RunConfig(**kw).validate()


def load_config(path) -> RunConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(doc)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)
