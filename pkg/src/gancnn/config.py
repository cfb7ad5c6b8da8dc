"""Run configuration: defaults < preset < config file < command-line flags."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .classifier import ClassifierTrainConfig
from .errors import ConfigError
from .gan import GanTrainConfig
from .harness import SweepConfig

NONE = "none"  # TOML has no null


@dataclass(frozen=True)
class PhantomSection:
    n_normal: int = 123
    n_bipolar: int = 49
    dims: tuple = (256, 256, 176)
    test_fraction: float = 0.25


@dataclass(frozen=True)
class PreprocessSection:
    factor: int = 4
    band: int = 22
    depth: int = 176
    classifier_size: int = 32


@dataclass(frozen=True)
class SweepSection:
    ratios: tuple = (0.0, 0.25, 0.5, 0.75, 1.0, 3.0)
    folds: int = 5
    cross_validate: bool = True


SECTIONS = {
    "phantom": PhantomSection,
    "preprocess": PreprocessSection,
    "gan": GanTrainConfig,
    "classifier": ClassifierTrainConfig,
    "sweep": SweepSection,
}
TOP_LEVEL = ("seed", "out", "jobs", "preset")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs"
    jobs: int = 1
    preset: str = "full"
    phantom: PhantomSection = field(default_factory=PhantomSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    classifier: ClassifierTrainConfig = field(default_factory=ClassifierTrainConfig)
    sweep: SweepSection = field(default_factory=SweepSection)

    def sweep_config(self) -> SweepConfig:
        return SweepConfig(tuple(self.sweep.ratios), self.sweep.folds, self.sweep.cross_validate,
                           self.preprocess.classifier_size)

    def gan_config(self) -> GanTrainConfig:
        return replace(self.gan, seed=self.seed)

    def classifier_config(self) -> ClassifierTrainConfig:
        return replace(self.classifier, seed=self.seed)


def desk_preset() -> RunConfig:
    """Laptop-sized pipeline: 16x16 slices, narrow networks, short schedules."""
    return RunConfig(
        preset="desk",
        phantom=PhantomSection(n_normal=40, n_bipolar=24, dims=(64, 64, 88)),
        preprocess=PreprocessSection(factor=4, band=22, depth=88, classifier_size=16),
        gan=GanTrainConfig(
            max_epochs=1000, early_stop_epoch=None, batch_size=16, noise_dim=32,
            snapshot_epochs=(1, 50, 200, 500, 1000), image_size=16, gen_dense_units=64,
            gen_channels=(32, 16), disc_filters=(16, 32), disc_dense_units=32,
        ),
        classifier=ClassifierTrainConfig(epochs=60, batch_size=8, filters=8, dense_units=(32, 16), conv_blocks=2),
    )


PRESETS = {"full": RunConfig, "desk": desk_preset}


def preset(name) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _coerce(value, default):
    if value == NONE:
        return None
    if isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _apply_section(section, values: dict, where: str):
    known = {f.name: f for f in fields(section)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    changes = {k: _coerce(v, getattr(section, k)) for k, v in values.items()}
    try:
        return replace(section, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def apply_overrides(cfg: RunConfig, data: dict) -> RunConfig:
    """Merge a nested mapping (as parsed from TOML) into ``cfg``; unknown keys are errors."""
    unknown = sorted(set(data) - set(TOP_LEVEL) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    changes = {}
    for name in SECTIONS:
        if name in data:
            if not isinstance(data[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            changes[name] = _apply_section(getattr(cfg, name), data[name], name)
    for key in ("seed", "out", "jobs"):
        if key in data:
            changes[key] = data[key]
    return replace(cfg, **changes)


def load_config(path=None, preset_name=None, defaults=None) -> RunConfig:
    """Preset, then ``defaults`` (e.g. environment-derived), then the file's values."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    name = preset_name or data.get("preset", "full")
    cfg = apply_overrides(preset(name), defaults or {})
    return apply_overrides(cfg, {k: v for k, v in data.items() if k != "preset"})


def _plain(value):
    if value is None:
        return NONE
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg: RunConfig) -> dict:
    out = {k: getattr(cfg, k) for k in TOP_LEVEL}
    for name in SECTIONS:
        out[name] = {f.name: _plain(getattr(getattr(cfg, name), f.name)) for f in fields(getattr(cfg, name))}
    return out


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


__all__ = ["RunConfig", "load_config", "apply_overrides", "dumps", "to_dict", "preset", "PRESETS"]
