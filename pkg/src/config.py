"""
Experiment configuration: dataclasses loaded from YAML with dotted overrides
"""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import yaml

from src.errors import ConfigError

ABLATION_TERMS = ("umil", "ma", "mmil", "triplet")
SPARSIFY_MODES = ("scatter", "gather")


@dataclass
class GenConfig:
    """Synthetic dataset generator settings"""
    n_bags: int = 240
    anomaly_fraction: float = 0.5
    t_min: int = 48
    t_max: int = 128
    rgb_dim: int = 1024
    audio_dim: int = 128
    flow_dim: int = 1024
    segment_min: int = 12
    segment_max: int = 32
    max_segments: int = 2
    audio_transient_prob: float = 0.6
    audio_lag: Tuple[int, int] = (-2, 4)
    flow_lag: Tuple[int, int] = (0, 1)
    latent_dim: int = 16
    rgb_signal_dims: int = 256
    audio_signal_dims: int = 24
    flow_signal_dims: int = 128
    rgb_amplitude: float = 0.5
    audio_amplitude: float = 1.5
    flow_amplitude: float = 0.6
    noise: float = 1.0
    event_jitter: float = 0.1
    distractor_prob: float = 0.75
    distractor_similarity: float = 1.0
    seed: int = 7

    def validate(self) -> None:
        for key in ("n_bags", "rgb_dim", "audio_dim", "flow_dim", "latent_dim",
                    "segment_min", "segment_max", "max_segments", "t_min"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"gen.{key}", "must be positive")
        if not 0.0 < self.anomaly_fraction < 1.0:
            raise ConfigError("gen.anomaly_fraction", "must lie in (0, 1)")
        if self.t_max < self.t_min:
            raise ConfigError("gen.t_max", "must be >= t_min")
        if self.segment_max < self.segment_min:
            raise ConfigError("gen.segment_max", "must be >= segment_min")
        for key in ("audio_lag", "flow_lag"):
            low, high = getattr(self, key)
            if low > high:
                raise ConfigError(f"gen.{key}", "range must be ordered")
            if max(abs(low), abs(high)) >= self.segment_min:
                raise ConfigError(f"gen.{key}", "lags must be smaller than segment_min")
        if not (0.0 <= self.distractor_prob <= 1.0 and 0.0 <= self.distractor_similarity <= 1.0):
            raise ConfigError("gen.distractor_prob", "distractor settings must lie in [0, 1]")
        if not 0.0 <= self.audio_transient_prob <= 1.0:
            raise ConfigError("gen.audio_transient_prob", "must lie in [0, 1]")
        if self.event_jitter < 0 or self.noise < 0:
            raise ConfigError("gen.event_jitter", "event_jitter and noise must be nonnegative")
        if self.rgb_signal_dims > self.rgb_dim:
            raise ConfigError("gen.rgb_signal_dims", "exceeds rgb_dim")
        if self.audio_signal_dims > self.audio_dim:
            raise ConfigError("gen.audio_signal_dims", "exceeds audio_dim")
        if self.flow_signal_dims > min(self.flow_dim, self.rgb_signal_dims):
            raise ConfigError("gen.flow_signal_dims", "exceeds flow_dim or rgb_signal_dims")


@dataclass
class EncoderConfig:
    """Unimodal encoder sizes (reduced dims per modality)"""
    d_rgb: int = 128
    d_flow: int = 64
    d_audio: int = 32
    heads: int = 4
    layers: int = 2
    local_window: int = 9
    ffn_multiplier: int = 2
    conv_kernel: int = 3

    def dims(self) -> Dict[str, int]:
        return {"rgb": self.d_rgb, "audio": self.d_audio, "flow": self.d_flow}

    def validate(self) -> None:
        if not self.d_rgb > self.d_flow > self.d_audio > 0:
            raise ConfigError("encoder.d_rgb", "information ordering D_R > D_F > D_A violated")
        if self.heads <= 0:
            raise ConfigError("encoder.heads", "must be positive")
        for key in ("d_rgb", "d_flow", "d_audio"):
            if getattr(self, key) % self.heads:
                raise ConfigError(f"encoder.{key}", "must be divisible by heads")
        if self.local_window < 1 or self.local_window % 2 == 0:
            raise ConfigError("encoder.local_window", "must be a positive odd integer")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ConfigError("encoder.conv_kernel", "must be a positive odd integer")
        if self.layers < 0 or self.ffn_multiplier <= 0:
            raise ConfigError("encoder.layers", "layers >= 0 and ffn_multiplier > 0 required")


@dataclass
class FusionConfig:
    """Multimodal encoder and triplet settings"""
    hidden_dim: int = 128
    out_dim: int = 64
    tcn_dilations: Tuple[int, ...] = (1, 2, 4)
    tcn_kernel: int = 3
    margin: float = 1.0

    def validate(self) -> None:
        if self.hidden_dim <= 0 or self.out_dim <= 0:
            raise ConfigError("fusion.out_dim", "must be positive")
        if self.tcn_kernel < 1 or self.tcn_kernel % 2 == 0:
            raise ConfigError("fusion.tcn_kernel", "must be a positive odd integer")
        if any(d <= 0 for d in self.tcn_dilations):
            raise ConfigError("fusion.tcn_dilations", "must be positive")
        if self.margin < 0:
            raise ConfigError("fusion.margin", "must be nonnegative")


@dataclass
class TrainConfig:
    """Joint optimisation settings; lambda_* weight the total loss"""
    lambda_ma: float = 10.0
    lambda_mmil: float = 10.0
    lambda_triplet: float = 0.001
    lambda_aux: float = 0.01
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 5e-4
    adam_eps: float = 1e-8
    batch_size: int = 16
    iterations: int = 300
    t_train: int = 64
    eps: float = 1e-6
    window: int = 50
    k_search: Optional[int] = None
    seed: int = 0
    ablate: List[str] = field(default_factory=list)
    holdout: float = 0.2
    train_fraction: float = 1.0
    frame_drop: float = 0.0
    eval_every: int = 50
    log_every: int = 10
    sparsify_mode: str = "scatter"
    align_to_encoder: bool = True
    dtype: str = "float64"

    def enabled(self, term: str) -> bool:
        return term not in self.ablate

    def validate(self) -> None:
        for key in ("lambda_ma", "lambda_mmil", "lambda_triplet", "lambda_aux",
                    "lr", "weight_decay"):
            if getattr(self, key) < 0:
                raise ConfigError(f"train.{key}", "must be nonnegative")
        unknown = [a for a in self.ablate if a not in ABLATION_TERMS]
        if unknown:
            raise ConfigError("train.ablate", f"unknown terms {unknown}")
        if self.enabled("triplet") and self.batch_size < 2:
            raise ConfigError("train.batch_size", "must be >= 2 when the triplet term is enabled")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be positive")
        if self.t_train < 16:
            raise ConfigError("train.t_train", "must be >= 16")
        if not 0.0 < self.eps < 0.5:
            raise ConfigError("train.eps", "must lie in (0, 0.5)")
        if self.iterations < 0 or self.window < 1:
            raise ConfigError("train.iterations", "iterations >= 0 and window >= 1 required")
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError("train.holdout", "must lie in (0, 1)")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError("train.train_fraction", "must lie in (0, 1]")
        if not 0.0 <= self.frame_drop < 1.0:
            raise ConfigError("train.frame_drop", "must lie in [0, 1)")
        if self.sparsify_mode not in SPARSIFY_MODES:
            raise ConfigError("train.sparsify_mode", f"expected one of {SPARSIFY_MODES}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("train.dtype", "expected float64 or float32")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("train.beta1", "betas must lie in [0, 1)")


SECTIONS = {
    "gen": GenConfig,
    "encoder": EncoderConfig,
    "fusion": FusionConfig,
    "train": TrainConfig,
}


@dataclass
class ExperimentConfig:
    """Root configuration; every output directory stores its resolved copy"""
    gen: GenConfig = field(default_factory=GenConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ExperimentConfig":
        config = cls()
        for section, values in (data or {}).items():
            if section not in SECTIONS:
                raise ConfigError(section, "unknown config section")
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(section, "section must be a mapping")
            for key, value in values.items():
                config.set(f"{section}.{key}", value)
        return config

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        path = Path(path).expanduser()
        if not path.exists():
            raise ConfigError(str(path), "configuration file not found")
        with path.open("r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
        if not isinstance(data, dict):
            raise ConfigError(str(path), f"YAML config must contain a mapping, got {type(data).__name__}")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "ExperimentConfig":
        config = cls.from_yaml(path) if path else cls()
        config.apply_overrides(overrides)
        config.validate()
        return config

    def set(self, dotted_key: str, value: Any) -> None:
        section, _, key = dotted_key.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(dotted_key, "unknown config key")
        target = getattr(self, section)
        known = {f.name: f for f in fields(target)}
        if key not in known:
            raise ConfigError(dotted_key, "unknown config key")
        setattr(target, key, _coerce(dotted_key, getattr(target, key), known[key].type, value))

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        for item in overrides or ():
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(item, "override must look like section.key=value")
            self.set(key.strip(), yaml.safe_load(raw))

    def validate(self) -> "ExperimentConfig":
        self.gen.validate()
        self.encoder.validate()
        self.fusion.validate()
        self.train.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for section in data.values():
            for key, value in section.items():
                if isinstance(value, tuple):
                    section[key] = list(value)
        return data

    def save(self, path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8") as handle:
            yaml.safe_dump(self.to_dict(), handle, sort_keys=False)
        return path


def _coerce(key: str, current: Any, annotation: Any, value: Any) -> Any:
    """Cast a parsed YAML value to the type of the field it replaces"""
    if value is None:
        if "Optional" in str(annotation):
            return None
        raise ConfigError(key, "value may not be null")
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(current, tuple):
            return tuple(int(v) for v in value)
        if isinstance(current, list):
            items = value if isinstance(value, (list, tuple)) else [value]
            return [str(v) for v in items]
        if isinstance(current, int) or "Optional[int]" in str(annotation):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"cannot use {value!r} here") from None
    return value
