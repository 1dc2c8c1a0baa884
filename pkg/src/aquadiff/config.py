"""Run configuration: one YAML file covering every module, plus presets.

The file holds nested sections mirroring the library configs::

    preset: desk            # optional starting point: desk | full
    seed: 0
    device: cpu
    data_root: path/to/pairs
    workdir: runs/exp1
    unet: {base_channels: 32, ...}
    phys: {anet_output_channels: 3, ...}
    schedule: {timesteps: 200, beta_start: 1.0e-4, beta_end: 0.1}
    train: {batch_size: 4, learning_rate: 4.0e-4, ...}
    sampler: {steps: 25, phi_time: destination}
    synthesis: {depth_range: [1.0, 3.0], ...}

Unknown keys anywhere are rejected.  Section values override the preset;
command-line flags override both.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import SynthesisConfig
from .networks import PhysNetConfig, UNetConfig
from .schedule import NoiseSchedule, build_schedule
from .training import TrainConfig


class ConfigFileError(ValueError):
    """Raised for unreadable, unknown-key or inconsistent configuration."""


@dataclass(frozen=True)
class ScheduleSettings:
    timesteps: int = 1000
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return build_schedule(
            timesteps=self.timesteps,
            kind=self.kind,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
        )

    @classmethod
    def desk(cls) -> "ScheduleSettings":
        # beta_end 0.1 keeps the terminal signal level near zero at T=200
        return cls(timesteps=200, beta_end=0.1)


@dataclass(frozen=True)
class SamplerSettings:
    steps: int = 25
    phi_time: str = "destination"

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigFileError("sampler steps must be >= 1")
        if self.phi_time not in ("destination", "source"):
            raise ConfigFileError(f"unknown phi_time {self.phi_time!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    data_root: str | None = None
    workdir: str = "aquadiff_run"
    unet: UNetConfig = field(default_factory=UNetConfig)
    phys: PhysNetConfig = field(default_factory=PhysNetConfig)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)

    def validated(self) -> "RunConfig":
        if self.train.resolution != self.unet.input_resolution:
            raise ConfigFileError(
                f"train.resolution ({self.train.resolution}) must equal "
                f"unet.input_resolution ({self.unet.input_resolution})"
            )
        if self.sampler.steps > self.schedule.timesteps:
            raise ConfigFileError(
                f"sampler.steps ({self.sampler.steps}) exceeds "
                f"schedule.timesteps ({self.schedule.timesteps})"
            )
        return self


def desk_run_config(**top_level: Any) -> RunConfig:
    """32x32 CPU-scale preset."""
    return RunConfig(
        unet=UNetConfig.desk(),
        schedule=ScheduleSettings.desk(),
        train=TrainConfig.desk(),
        **top_level,
    )


def full_run_config(**top_level: Any) -> RunConfig:
    """Full-scale preset (128x128, 1000 timesteps)."""
    return RunConfig(**top_level)


_PRESETS = {"desk": desk_run_config, "full": full_run_config}

_SECTION_TYPES = {
    "unet": UNetConfig,
    "phys": PhysNetConfig,
    "schedule": ScheduleSettings,
    "train": TrainConfig,
    "sampler": SamplerSettings,
    "synthesis": SynthesisConfig,
}

_TOP_LEVEL_SCALARS = ("seed", "device", "data_root", "workdir")


def _merge_section(current: Any, section_type: type, values: Any, name: str) -> Any:
    if not isinstance(values, dict):
        raise ConfigFileError(f"section {name!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(section_type)}
    kwargs = dataclasses.asdict(current)
    for key, value in values.items():
        if key not in known:
            raise ConfigFileError(f"unknown key {name}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    for key, value in list(kwargs.items()):
        if isinstance(value, list):
            kwargs[key] = tuple(value)
    try:
        return section_type(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"invalid section {name!r}: {exc}") from exc


def run_config_from_dict(raw: Any) -> RunConfig:
    """Validate a parsed mapping into a RunConfig."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigFileError("configuration must be a mapping at top level")
    raw = dict(raw)
    preset_name = raw.pop("preset", "full")
    if preset_name not in _PRESETS:
        raise ConfigFileError(
            f"unknown preset {preset_name!r}; choose from {sorted(_PRESETS)}"
        )
    config = _PRESETS[preset_name]()
    updates: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _TOP_LEVEL_SCALARS:
            updates[key] = value
        elif key in _SECTION_TYPES:
            updates[key] = _merge_section(
                getattr(config, key), _SECTION_TYPES[key], value, key
            )
        else:
            raise ConfigFileError(f"unknown key {key}")
    return dataclasses.replace(config, **updates).validated()


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigFileError(f"malformed YAML in {path}: {exc}") from exc
    return run_config_from_dict(raw)
