"""Experiment configuration: JSON file plus dotted-path overrides, with model presets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .backbone import PRESETS, BackboneConfig
from .diffusion import FULL_ALPHA_FIRST, FULL_ALPHA_LAST, DenoiserConfig, NoiseSchedule, make_schedule
from .shallow import FULL_HIDDEN, TOY_HIDDEN


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    n: int = 1000
    image_size: int = 32
    channels: int = 1
    class_sep: float = 1.0
    fractions: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    seed: int = 0


@dataclass
class ModelConfig:
    preset: str = "toy"
    K: int = 3
    shallow_hidden: list = field(default_factory=lambda: list(TOY_HIDDEN))
    denoiser_width: int = 128
    encoder_hidden: list = field(default_factory=lambda: [128, 64])
    chain_hidden: list = field(default_factory=lambda: [64, 32])


@dataclass
class DiffusionConfig:
    T: int = 100
    # Full-scale endpoints with 1 - alpha scaled by 1000 / T (keeps alpha_bar_T small at T = 100).
    alpha_first: float = 1 - 1e-3
    alpha_last: float = 0.8


@dataclass
class EnsembleConfig:
    M: int = 10
    temperature: float = 0.3162


@dataclass
class TrainConfig:
    epochs_backbone: int = 20
    epochs_shallow: int = 20
    epochs_diffusion: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    patience: int = 5
    dtype: str = "float32"


@dataclass
class InferConfig:
    seed: int = 0
    split: str = "test"
    perturb: list = field(default_factory=list)
    batch_size: int = 50


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    output_dir: str = "runs/default"

    # -- derived views -----------------------------------------------------

    def backbone_config(self, num_classes: int = 2) -> BackboneConfig:
        base = PRESETS[self.model.preset]
        try:
            return replace(base, image_size=self.data.image_size, channels=self.data.channels,
                           num_classes=num_classes, tap_levels=self.model.K)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def denoiser_config(self, num_classes: int = 2) -> DenoiserConfig:
        d = self.data
        return DenoiserConfig(image_dim=d.image_size * d.image_size * d.channels, num_classes=num_classes,
                              T=self.diffusion.T, width=self.model.denoiser_width,
                              encoder_hidden=tuple(self.model.encoder_hidden),
                              chain_hidden=tuple(self.model.chain_hidden))

    def schedule(self) -> NoiseSchedule:
        try:
            return make_schedule(self.diffusion.T, self.diffusion.alpha_first, self.diffusion.alpha_last)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_hash(self, num_classes: int) -> str:
        """Hash of everything that fixes parameter shapes and the diffusion chain."""
        payload = {
            "backbone": self.backbone_config(num_classes).to_dict(),
            "shallow_hidden": list(self.model.shallow_hidden),
            "denoiser": {"width": self.model.denoiser_width, "encoder_hidden": list(self.model.encoder_hidden),
                         "chain_hidden": list(self.model.chain_hidden)},
            "schedule": {"T": self.diffusion.T, "alpha_first": self.diffusion.alpha_first,
                         "alpha_last": self.diffusion.alpha_last},
            "dtype": self.train.dtype,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        if self.data.source not in ("synthetic", "dir"):
            raise ConfigError(f"data.source must be 'synthetic' or 'dir', got {self.data.source!r}")
        if self.data.source == "dir" and not self.data.path:
            raise ConfigError("data.path is required when data.source = 'dir'")
        if self.model.preset not in PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}")
        L = PRESETS[self.model.preset].num_blocks
        if not 1 <= self.model.K < L:
            raise ConfigError(f"model.K must satisfy 1 <= K < L = {L}, got {self.model.K}")
        if self.ensemble.M < 1:
            raise ConfigError("ensemble.M must be >= 1")
        if not self.ensemble.temperature > 0:
            raise ConfigError("ensemble.temperature must be positive")
        t = self.train
        if min(t.epochs_backbone, t.epochs_shallow, t.epochs_diffusion, t.batch_size) < 1 or not t.lr > 0:
            raise ConfigError("epochs, batch size and learning rate must be positive")
        if t.optimizer not in ("adam", "sgd"):
            raise ConfigError("train.optimizer must be 'adam' or 'sgd'")
        if t.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be 'float32' or 'float64'")
        if self.infer.split not in ("train", "val", "test"):
            raise ConfigError("infer.split must be train, val or test")
        self.backbone_config()
        self.schedule()
        from .perturb import PerturbSpec

        for p in self.infer.perturb:
            try:
                PerturbSpec.parse(p)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return self


PRESET_OVERLAYS: dict[str, dict[str, Any]] = {
    "toy": {},
    "full": {
        "data.image_size": 224,
        "data.channels": 3,
        "model.K": 5,
        "model.shallow_hidden": list(FULL_HIDDEN),
        "model.denoiser_width": 4096,
        "model.encoder_hidden": [300, 100],
        "diffusion.T": 1000,
        "diffusion.alpha_first": FULL_ALPHA_FIRST,
        "diffusion.alpha_last": FULL_ALPHA_LAST,
        "ensemble.M": 20,
        "train.lr": 1e-4,
    },
}


def config_keys(cfg: Any = None, prefix: str = "") -> dict[str, Any]:
    """Flat ``{dotted.key: default}`` view of every config field."""
    cfg = ExperimentConfig() if cfg is None else cfg
    out: dict[str, Any] = {}
    for f in fields(cfg):
        if not f.init:
            continue
        value = getattr(cfg, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value):
            out.update(config_keys(value, key + "."))
        else:
            out[key] = value
    return out


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            if not isinstance(default, list):
                raise ConfigError(f"cannot parse value for {key}: {value!r}") from exc
            value = [v for v in value.split(",") if v]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"bad type for {key}: {value!r}")
    return value


def _set(cfg: ExperimentConfig, key: str, value: Any) -> None:
    obj: Any = cfg
    *path, last = key.split(".")
    for p in path:
        obj = getattr(obj, p)
    setattr(obj, last, value)


def build_config(values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Defaults, then the preset overlay, then file values, then CLI overrides.

    Unknown keys raise :class:`ConfigError`.
    """
    flat = _flatten(values or {})
    flat.update(overrides or {})
    known = config_keys()
    unknown = sorted(set(flat) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    preset = flat.get("model.preset", "toy")
    if preset not in PRESET_OVERLAYS:
        raise ConfigError(f"model.preset must be one of {sorted(PRESET_OVERLAYS)}")
    cfg = ExperimentConfig()
    for key, value in {**PRESET_OVERLAYS[preset], **flat}.items():
        _set(cfg, key, _coerce(key, value, known[key]))
    return cfg.validate()


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return build_config(values, overrides)


def parse_overrides(items: list[str] | None) -> dict[str, Any]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out
