"""Run configuration: every tunable of the system as one nested, validated tree.

Dataclass defaults mirror the published full-scale recipe; desk_config() is the
preset actually used for runnable experiments on one machine.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .content import AugmentConfig, ExpanderConfig
from .data import SceneSpec
from .encoder import EncoderConfig, pyramid_feature_dims
from .errors import ConfigError
from .evaluation import ProbeConfig
from .flow import EstimatorConfig
from .losses import LayerCoeffTable


class SamplingStrategy(str, enum.Enum):
    FLOW_ESTIMATOR_FROZEN = "flow_estimator_frozen"
    FLOW_ESTIMATOR_FINETUNE = "flow_estimator_finetune"
    EPOCH_ALTERNATION = "epoch_alternation"
    BATCH_ALTERNATION = "batch_alternation"
    COMBINED_LOSS = "combined_loss"


STRATEGY_NAMES = tuple(s.value for s in SamplingStrategy)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyper-parameters.

    Note: the published recipe lists end_lr 3e-8 in its hyper-parameter table
    while its text says the cosine schedule ends at 1e-5; the table value is
    the default here and the field is the single source of truth.
    flow_alpha's role is a global scale on the flow-side losses (interpretation;
    it is named but never defined in the source text).
    """

    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 384
    flow_batch_size: int = 8
    lr_encoder: float = 3e-4
    lr_flow: float = 1e-4
    end_lr: float = 3e-8
    weight_decay: float = 1e-6
    flow_weight_decay: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    flow_start_epoch: int = 10
    vc_warmup_epochs: int = 1
    flow_coeff: float = 1.0
    flow_alpha: float = 0.1
    cycle_coeff: float = 0.2
    smooth_factor: float = 75.0
    strategy: str = "combined_loss"
    flow_only: bool = False
    seed: int = 0
    eval_every: int = 1
    rms_fault_threshold: float | None = None

    def __post_init__(self):
        for name in ("lr_encoder", "lr_flow", "end_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.flow_start_epoch < self.epochs:
            raise ConfigError("flow_start_epoch must lie in [0, epochs)")
        if self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be < epochs")
        if self.strategy not in STRATEGY_NAMES:
            raise ConfigError(f"strategy must be one of {STRATEGY_NAMES}")
        if self.batch_size < 2 or self.flow_batch_size < 1:
            raise ConfigError("batch sizes too small")


@dataclass(frozen=True)
class DataConfig:
    image_height: int = 64
    image_width: int = 64
    flow_pairs: int = 2048
    flow_val_pairs: int = 128
    content_images: int = 4096
    content_size: int = 96
    probe_scenes: int = 96
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        if self.image_height % 64 or self.image_width % 64:
            raise ConfigError("image dimensions must be divisible by 64")
        if self.scene.height != self.image_height or self.scene.width != self.image_width:
            raise ConfigError("scene size must match the image resolution")


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    expander: ExpanderConfig = field(default_factory=ExpanderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    coeffs: LayerCoeffTable = field(default_factory=LayerCoeffTable)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


def validate_config(cfg: RunConfig) -> None:
    dims = pyramid_feature_dims(cfg.encoder)
    if cfg.expander.dims[0] != dims[0]:
        raise ConfigError(
            f"expander input width {cfg.expander.dims[0]} != encoder coarsest width {dims[0]}"
        )
    if cfg.augment.out_size % 64:
        raise ConfigError("augment.out_size must be divisible by 64 (views pass the encoder)")
    if cfg.data.content_size < cfg.augment.out_size:
        raise ConfigError("content_size must be >= augment.out_size")


def desk_config(seed: int = 0) -> RunConfig:
    """Single-machine preset: small encoder, narrow estimator, 64x64 scenes."""
    return RunConfig(
        encoder=EncoderConfig(backbone_kind="small_cnn", width_multiplier=0.75, drop_path_rate=0.0),
        estimator=EstimatorConfig(size_factor=1, base_widths=(8, 24, 24, 16)),
        expander=ExpanderConfig(dims=(96, 384, 384, 384)),
        augment=AugmentConfig(out_size=64),
        train=TrainConfig(
            epochs=30,
            warmup_epochs=2,
            batch_size=8,
            flow_batch_size=8,
            flow_start_epoch=3,
            seed=seed,
        ),
        data=DataConfig(
            flow_pairs=2048,
            flow_val_pairs=128,
            content_images=2048,
            content_size=96,
            probe_scenes=96,
        ),
        probe=ProbeConfig(epochs=100, seed=seed),
    )


# ----------------------------------------------------------------------
# Serialization and dotted-key overrides
# ----------------------------------------------------------------------


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def to_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def _build(cls, raw):
    if not is_dataclass(cls):
        return raw
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"expected mapping for {cls.__name__}, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {cls.__name__}.{key}")
        sub = _field_dataclass(known[key])
        if sub is not None:
            kwargs[key] = _build(sub, value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


_FIELD_CLASSES = {
    "encoder": EncoderConfig,
    "estimator": EstimatorConfig,
    "expander": ExpanderConfig,
    "augment": AugmentConfig,
    "coeffs": LayerCoeffTable,
    "train": TrainConfig,
    "data": DataConfig,
    "probe": ProbeConfig,
    "scene": SceneSpec,
}


def _field_dataclass(f):
    return _FIELD_CLASSES.get(f.name)


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw)


def from_yaml(text: str) -> RunConfig:
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    return from_dict(raw)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return from_yaml(path.read_text())


def apply_override(cfg, dotted_key: str, raw_value: str):
    """Return a copy of cfg with `a.b.c=value` applied; unknown keys are rejected."""
    parts = dotted_key.split(".")
    return _apply(cfg, parts, raw_value, dotted_key)


def _apply(node, parts, raw_value, full_key):
    if not is_dataclass(node):
        raise ConfigError(f"cannot descend into non-config value at {full_key}")
    names = {f.name for f in fields(node)}
    head = parts[0]
    if head not in names:
        raise ConfigError(f"unknown config key {full_key}")
    if len(parts) == 1:
        value = yaml.safe_load(raw_value)
        current = getattr(node, head)
        if isinstance(value, list):
            value = tuple(value)
        if is_dataclass(current) and not isinstance(value, dict):
            raise ConfigError(f"{full_key} is a config section, not a value")
        if isinstance(current, tuple) and not isinstance(value, tuple):
            raise ConfigError(f"{full_key} expects a list value")
        try:
            return replace(node, **{head: value})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {full_key}: {exc}") from exc
    child = _apply(getattr(node, head), parts[1:], raw_value, full_key)
    return replace(node, **{head: child})


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg = apply_override(cfg, key.strip(), value.strip())
    return cfg
