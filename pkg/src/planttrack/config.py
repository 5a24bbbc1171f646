"""Run configuration: one JSON document covering generation, training, peaks and tracking.

Missing keys take their defaults; unknown keys are rejected at every level.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from planttrack.errors import ValidationError
from planttrack.peaks import PeakConfig
from planttrack.synthetic import GenConfig
from planttrack.tracker import TrackConfig
from planttrack.train import TrainConfig


@dataclass
class ExperimentConfig:
    train_count: int = 20
    test_count: int = 10
    sequence_frames: int = 20
    sequence_step: float = 0.005
    match_radius: int = 1
    # distribution B: replacement background signature and noise multiplier
    shift_background_seed: int = 1000
    noise_scale: float = 2.0

    def __post_init__(self):
        if self.train_count < 1 or self.test_count < 1 or self.sequence_frames < 1:
            raise ValidationError("experiment counts must be >= 1")
        if self.match_radius < 0:
            raise ValidationError("match radius must be >= 0")


@dataclass
class Paths:
    dataset: str | None = None
    model: str | None = None
    output: str | None = None


@dataclass
class RunConfig:
    name: str = "planttrack"
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    peak: PeakConfig = field(default_factory=PeakConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ValidationError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(f"{where}: unknown config key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)
