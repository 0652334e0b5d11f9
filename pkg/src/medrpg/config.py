"""Run configuration: one flat key-value file covering model, training, data and synthetic settings.

Keys are the field names of :class:`ModelConfig` and :class:`TrainConfig`, plus the
generator fields of :class:`SyntheticConfig` (its ``seed`` is spelled ``synthetic_seed``;
``image_size`` is shared with the model) and the run-level keys below.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .data import SplitSpec
from .engine import TrainConfig
from .errors import ConfigError
from .model import ModelConfig
from .synthetic import SyntheticConfig

PRESETS = ("toy", "paper")
RUN_KEYS = ("preset", "data_dir", "out_dir", "split_ratios", "split_seed")
_SYNTH_RENAMES = {"seed": "synthetic_seed"}


def _synthetic_keys() -> dict[str, str]:
    """Flat key -> SyntheticConfig field."""
    out = {}
    for f in fields(SyntheticConfig):
        out[_SYNTH_RENAMES.get(f.name, f.name)] = f.name
    return out


def known_keys() -> set[str]:
    return ({f.name for f in fields(ModelConfig)} | {f.name for f in fields(TrainConfig)} | set(_synthetic_keys())
            | set(RUN_KEYS))


@dataclass(frozen=True)
class RunConfig:
    preset: str = "toy"
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    train: TrainConfig = field(default_factory=TrainConfig.toy)
    synthetic: SyntheticConfig = field(default_factory=lambda: SyntheticConfig(n_samples=2400))
    data_dir: str = "data/synthetic"
    out_dir: str = "runs/toy"
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(tuple(self.split_ratios), self.split_seed)

    @classmethod
    def from_preset(cls, preset: str = "toy") -> "RunConfig":
        if preset == "toy":
            return cls()
        if preset == "paper":
            # recorded for documentation; full-scale training is far beyond a desk CPU
            return cls(preset="paper", model=ModelConfig.paper(), train=TrainConfig(checkpoint_dir="runs/paper"),
                       synthetic=SyntheticConfig(image_size=640, n_samples=2400), out_dir="runs/paper")
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")

    @classmethod
    def from_mapping(cls, values: dict[str, Any]) -> "RunConfig":
        values = dict(values or {})
        unknown = sorted(set(values) - known_keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        base = cls.from_preset(values.pop("preset", "toy"))
        return base.override(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        try:
            values = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from None
        if values is not None and not isinstance(values, dict):
            raise ConfigError(f"config {path} must be a flat mapping of keys to values")
        return cls.from_mapping(values or {})

    def override(self, **values) -> "RunConfig":
        """Apply flat overrides; unknown keys and invalid values raise :class:`ConfigError`."""
        unknown = sorted(set(values) - known_keys())
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        model_f = {f.name for f in fields(ModelConfig)}
        train_f = {f.name for f in fields(TrainConfig)}
        synth_map = _synthetic_keys()
        m = {k: v for k, v in values.items() if k in model_f}
        t = {k: v for k, v in values.items() if k in train_f}
        s = {synth_map[k]: v for k, v in values.items() if k in synth_map}
        run = {k: v for k, v in values.items() if k in RUN_KEYS and k != "preset"}
        if "split_ratios" in run:
            run["split_ratios"] = tuple(float(r) for r in run["split_ratios"])
        if "out_dir" in run and "checkpoint_dir" not in t:
            t["checkpoint_dir"] = str(run["out_dir"])
        try:
            out = replace(self, model=replace(self.model, **m), train=replace(self.train, **t),
                          synthetic=replace(self.synthetic, **s), **run)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        out.split  # validates ratios
        return out

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {"preset": self.preset, "data_dir": self.data_dir, "out_dir": self.out_dir,
                                "split_ratios": list(self.split_ratios), "split_seed": self.split_seed}
        flat.update(asdict(self.model))
        flat.update(asdict(self.train))
        for k, name in _synthetic_keys().items():
            if k != "image_size":
                flat[k] = getattr(self.synthetic, name)
        return flat

    def dump(self, path) -> Path:
        """Echo the effective configuration; loading the file reproduces this object."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_flat(), sort_keys=True), encoding="utf-8")
        return path
