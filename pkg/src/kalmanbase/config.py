"""Run configuration: one JSON file, validated before any work starts.

Unknown keys are rejected at every level. ``--set a.b=value`` style
overrides are applied to the raw dict before validation, so they go through
the same checks as file values.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError

OUTPUT_DIR_ENV = "KALMANBASE_OUTPUT_DIR"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FormatConfig(_Section):
    id: str | list[str]
    x: str
    y: str
    time: str = "t"
    frame: str | None = None
    frame_rate: float | None = None
    unit: Literal["m", "ft"] = "m"
    delimiter: str = ","


class SynthConfig(_Section):
    n_tracks: int = Field(1000, ge=1)
    sigma_accel: tuple[float, float] = (0.5, 0.3)
    obs_noise: tuple[tuple[float, float], tuple[float, float]] = ((0.25, 0.0), (0.0, 0.25))
    init_speed_range: tuple[float, float] = (10.0, 30.0)
    heading_range: float = 0.2
    maneuver: Literal["none", "sinusoidal_accel"] = "none"
    amplitude: float = 0.0
    period: float = 6.0
    track_len: int = 40
    noisy_future: bool = False


class DataConfig(_Section):
    path: Path | None = None
    cache: Path | None = None
    synth: SynthConfig | None = None
    format: FormatConfig | Literal["ngsim"] | None = None
    rate: float = Field(5.0, gt=0)
    source_rate: float | None = None
    align_heading: bool = False
    test_fraction: float = Field(0.2, ge=0, lt=1)

    @model_validator(mode="after")
    def _one_source(self):
        given = [n for n in ("path", "cache", "synth") if getattr(self, n) is not None]
        if len(given) != 1:
            raise ValueError(f"data: exactly one of path, cache, synth is required (got {given or 'none'})")
        if self.path is not None and self.format is None:
            raise ValueError("data.format is required with data.path")
        return self


class ModelConfig(_Section):
    kind: Literal["cv", "cv_multimodal", "rnn"] = "cv"
    hidden_size: int = Field(32, ge=1)
    dt: float = Field(0.2, gt=0)
    cov_scale_power: Literal[1, 2] = 2


class TrainSection(_Section):
    learning_rate: float = Field(1e-3, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(20, ge=1)
    clip_norm: float = Field(10.0, gt=0)
    val_fraction: float = Field(0.1, ge=0, lt=1)


class ExplorationConfig(_Section):
    sigma_theta: float = Field(0.0, ge=0, description="heading std, rad")
    sigma_alpha: float = Field(0.1, ge=0, description="velocity factor std")
    k: int = Field(6, ge=1)
    n_mc: int = Field(100_000, ge=10)


class SweepConfig(_Section):
    sigma_theta: list[float] = Field(default_factory=lambda: [0.0])
    sigma_alpha: list[float] = Field(default_factory=lambda: [0.1])


class ReportConfig(_Section):
    ellipse_level: float = Field(1.0, gt=0)
    write_predictions: bool = False


class RunConfig(_Section):
    data: DataConfig
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainSection = Field(default_factory=TrainSection)
    exploration: ExplorationConfig = Field(default_factory=ExplorationConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)
    output_dir: Path = Path("runs/default")
    seed: int = 0
    workers: int = Field(1, ge=1)

    def echo(self) -> dict:
        return self.model_dump(mode="json")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = _parse_value(value)


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "config"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def load_config(path=None, overrides=(), seed=None, workers=None, output_dir=None, env=None) -> RunConfig:
    """Precedence for every key: flag, then (output dir only) environment,
    then config file, then default."""
    env = os.environ if env is None else env
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for o in overrides:
        apply_override(raw, o)
    if env.get(OUTPUT_DIR_ENV):
        raw["output_dir"] = env[OUTPUT_DIR_ENV]
    for key, value in (("seed", seed), ("workers", workers), ("output_dir", output_dir)):
        if value is not None:
            raw[key] = str(value) if key == "output_dir" else value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None
