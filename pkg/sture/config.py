"""Configuration management for the tracking engine."""
import math
import os
from dataclasses import dataclass, fields
from typing import Any, Dict, Mapping, Type, TypeVar

from dotenv import load_dotenv

from sture.errors import ConfigError

load_dotenv()


class Settings:
    """Process-level settings read from the environment."""

    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    DEBUG: bool = os.getenv("DEBUG", "false").lower() == "true"

    # Runs
    OUTPUT_DIR: str = os.getenv("STURE_OUTPUT_DIR", "runs")
    JOBS: int = int(os.getenv("STURE_JOBS", "1"))


settings = Settings()


C = TypeVar("C", bound="BaseConfig")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def frames_for(fraction: float, frame_rate: float) -> int:
    """Frame count for ``fraction * frame_rate``, rounded half up, at least 1."""
    return max(1, int(math.floor(fraction * frame_rate + 0.5)))


@dataclass
class BaseConfig:
    """Typed key/value configuration with string coercion."""

    @classmethod
    def valid_keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def coerce(cls, key: str, raw: Any) -> Any:
        field_types = {f.name: f.type for f in fields(cls)}
        if key not in field_types:
            raise ConfigError(f"Unknown config key '{key}'", key=key, valid_keys=field_types)
        kind = field_types[key]
        if not isinstance(raw, str):
            return raw
        text = raw.strip()
        try:
            if kind in (bool, "bool"):
                if text.lower() in _TRUE:
                    return True
                if text.lower() in _FALSE:
                    return False
                raise ValueError(text)
            if kind in (int, "int"):
                return int(text)
            if kind in (float, "float"):
                return float(text)
        except ValueError:
            raise ConfigError(f"Cannot parse value '{raw}' for key '{key}'", key=key)
        return text

    @classmethod
    def from_mapping(cls: Type[C], values: Mapping[str, Any]) -> C:
        kwargs = {key: cls.coerce(key, raw) for key, raw in values.items()}
        config = cls(**kwargs)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self) -> None:
        pass


@dataclass
class TrackerConfig(BaseConfig):
    """Tracking thresholds; frame counts are relative to the frame rate."""

    tau_i: int = 6
    tau_t: int = 60
    L: int = 9
    tau_a: float = 0.8
    tau_s: float = 0.2
    tau_o: float = 0.5
    tau_d: float = 2.0
    T: int = 8
    M: int = 100
    D: int = 32
    seed: int = 0
    matching: str = "greedy"

    @property
    def I(self) -> int:
        # the overlap window shares the motion window
        return self.L

    @classmethod
    def for_frame_rate(cls, frame_rate: float, **overrides: Any) -> "TrackerConfig":
        if frame_rate <= 0:
            raise ConfigError(f"Frame rate must be positive, got {frame_rate}")
        values: Dict[str, Any] = {
            "tau_i": frames_for(0.2, frame_rate),
            "tau_t": frames_for(2.0, frame_rate),
            "L": frames_for(0.3, frame_rate),
        }
        values.update(overrides)
        return cls.from_mapping(values)

    def validate(self) -> None:
        for key in ("tau_i", "tau_t", "L", "T", "M", "D"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"'{key}' must be positive, got {getattr(self, key)}", key=key)
        for key in ("tau_a", "tau_s", "tau_o"):
            value = getattr(self, key)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"'{key}' must lie in (0, 1), got {value}", key=key)
        if self.tau_d <= 0:
            raise ConfigError(f"'tau_d' must be positive, got {self.tau_d}", key="tau_d")
        if self.seed < 0:
            raise ConfigError(f"'seed' must be non-negative, got {self.seed}", key="seed")
        if self.matching not in ("greedy", "hungarian"):
            raise ConfigError(f"'matching' must be greedy or hungarian, got {self.matching}", key="matching")


@dataclass
class TrainConfig(BaseConfig):
    """Desk-scale training configuration for the mutual learner."""

    P: int = 4
    Q: int = 2
    T: int = 8
    D: int = 32
    M: int = 100
    hidden: int = 32
    epochs: int = 80
    iterations: int = 10
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    margin: float = 0.3
    noise_rate: float = 0.1
    selective: bool = True
    attention: bool = True
    identity_loss: bool = False
    rms_cross_loss: bool = False
    seed: int = 1

    @property
    def batch_size(self) -> int:
        return self.P * self.Q * self.T

    def validate(self) -> None:
        for key in ("P", "Q", "T", "D", "M", "hidden", "iterations"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"'{key}' must be positive, got {getattr(self, key)}", key=key)
        if self.P < 2:
            raise ConfigError("'P' must be at least 2 so every anchor has negatives", key="P")
        if self.epochs < 0:
            raise ConfigError(f"'epochs' must be non-negative, got {self.epochs}", key="epochs")
        for key in ("lr", "margin", "eps"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"'{key}' must be positive, got {getattr(self, key)}", key=key)
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"'noise_rate' must lie in [0, 1), got {self.noise_rate}", key="noise_rate")


@dataclass
class DatasetSpec(BaseConfig):
    """Synthetic tracklet dataset for training and retrieval."""

    identities: int = 10
    sequences: int = 4
    frames: int = 16
    min_frames: int = 4
    input_dim: int = 16
    signal_dim: int = 4
    separation: float = 2.0
    noise: float = 0.05
    clutter: float = 3.0
    seed: int = 1

    def validate(self) -> None:
        for key in ("identities", "sequences", "frames", "min_frames", "input_dim", "signal_dim"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"'{key}' must be positive, got {getattr(self, key)}", key=key)
        if self.min_frames > self.frames:
            raise ConfigError("'min_frames' cannot exceed 'frames'", key="min_frames")
        if self.signal_dim > self.input_dim:
            raise ConfigError("'signal_dim' cannot exceed 'input_dim'", key="signal_dim")
        for key in ("noise", "clutter"):
            if getattr(self, key) < 0:
                raise ConfigError(f"'{key}' must be non-negative", key=key)


@dataclass
class ScenarioSpec(BaseConfig):
    """Synthetic MOT sequence: identities on straight lines with occlusions."""

    identities: int = 3
    frames: int = 40
    frame_rate: float = 30.0
    width: int = 640
    height: int = 480
    box_width: float = 40.0
    box_height: float = 100.0
    speed: float = 3.0
    occlusion: int = 5
    noise: float = 0.0
    dim: int = 32
    seed: int = 0

    def validate(self) -> None:
        for key in ("identities", "frames", "width", "height", "dim"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"'{key}' must be positive", key=key)
        if self.identities > self.dim:
            raise ConfigError("'identities' cannot exceed 'dim' for one-hot embeddings", key="identities")
        if self.occlusion < 0 or self.occlusion >= self.frames:
            raise ConfigError("'occlusion' must lie in [0, frames)", key="occlusion")
