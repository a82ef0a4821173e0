"""Dataclass configuration tree with strict JSON loading.

Every run is driven by a single :class:`Config`.  ``load_config`` rejects
unknown keys so that typos fail loudly, and ``to_dict``/``save_config``
round-trip the effective configuration into each run directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

CORRUPTIONS = ("NONE", "LOW_LIGHT", "FOG")
STRATEGIES = ("dynamic", "uniform", "manual", "dwa")
ARRANGEMENTS = ("sequential", "parallel")
PIXEL_LOSS_FORMS = ("literal", "residual")


@dataclass
class DataConfig:
    """Where paired data lives and how labels are encoded."""

    root: str = ""
    ignore_index: int = 255


@dataclass
class SynthConfig:
    """Synthetic paired-scene generator settings."""

    image_size: tuple[int, int] = (96, 96)
    shapes_min: int = 2
    shapes_max: int = 5
    thermal_classes: tuple[int, ...] = (1,)
    visible_corruption: str = "NONE"
    train_scenes: int = 16
    val_scenes: int = 4


@dataclass
class AugmentConfig:
    """Random resize / crop / brightness used during training."""

    enabled: bool = True
    scale_min: float = 0.5
    scale_max: float = 2.0
    crop_h: int = 360
    crop_w: int = 360
    brightness: bool = True
    brightness_min: float = 0.75
    brightness_max: float = 1.25


@dataclass
class SegNetConfig:
    """Hierarchical transformer encoder + all-MLP decoder."""

    widths: tuple[int, ...] = (16, 32, 64, 128)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    mlp_ratio: int = 4
    decoder_width: int = 64


@dataclass
class FusionNetConfig:
    """Dual dilated dense extractors + convolutional fuse decoder."""

    channels: int = 32
    growth: int = 16
    dense_layers: int = 3
    dilation: int = 2
    decoder_widths: tuple[int, ...] = (32,)


@dataclass
class InteractionConfig:
    """Cross-task attention bridge between the two sub-networks."""

    channels: int = 32
    heads: int = 4
    tap_channels: int = 32
    softmax_keys: bool = False
    arrangement: str = "sequential"
    compute_unused_tokens: bool = False


@dataclass
class LossConfig:
    eta: float = 0.5
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    grad_kernels: tuple[int, ...] = (3, 5, 7)
    # "residual" weights squared residuals against each source by saliency;
    # "literal" penalises distance to the saliency-scaled sources directly.
    # The residual form is the default because its optimum preserves full
    # source intensity inside salient regions instead of averaging it down.
    pixel_loss_form: str = "residual"


@dataclass
class ScheduleConfig:
    """Alternating two-phase training plan and loss weighting."""

    rounds: int = 8
    seg_iters: int = 10000
    fusion_iters: int = 5000
    batch_size: int = 8
    warmup_iters: int = 3000
    warmup_lr: float = 1e-6
    seg_lr: float = 8e-5
    seg_lr_end: float = 1e-7
    fusion_lr: float = 1e-4
    fusion_lr_end: float = 1e-8
    poly_power: float = 0.9
    temperature: float = 2.0
    eta_pref: tuple[float, float] = (1.0, 1.0)
    strategy: str = "dynamic"
    manual_lambdas: tuple[float, float] = (1.0, 1.0)
    clip_norm: float = 5.0


@dataclass
class Config:
    seed: int = 0
    num_classes: int = 14
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    fusion: FusionNetConfig = field(default_factory=FusionNetConfig)
    interaction: InteractionConfig = field(default_factory=InteractionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)


def _build(cls: type, raw: dict, path: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        sub = f"{path}.{name}" if path else name
        ftype = fields[name].type
        target = _DATACLASS_FIELDS.get((cls, name))
        if target is not None:
            kwargs[name] = _build(target, value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        elif isinstance(value, dict):
            raise ConfigError(f"{sub}: unexpected nested object")
        else:
            del ftype
            kwargs[name] = value
    return cls(**kwargs)


# Nested dataclass fields, resolved statically (string annotations make
# dataclasses.fields(...).type unreliable under `from __future__ import annotations`).
_DATACLASS_FIELDS: dict[tuple[type, str], type] = {
    (Config, "data"): DataConfig,
    (Config, "synth"): SynthConfig,
    (Config, "augment"): AugmentConfig,
    (Config, "segnet"): SegNetConfig,
    (Config, "fusion"): FusionNetConfig,
    (Config, "interaction"): InteractionConfig,
    (Config, "loss"): LossConfig,
    (Config, "schedule"): ScheduleConfig,
}


def validate_config(cfg: Config) -> Config:
    """Check cross-field invariants, raising :class:`ConfigError` on failure."""
    if cfg.num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if not (0 <= cfg.data.ignore_index):
        raise ConfigError("ignore_index must be non-negative")

    s = cfg.synth
    if s.image_size[0] < 8 or s.image_size[1] < 8:
        raise ConfigError("synth.image_size must be at least 8x8")
    if not (1 <= s.shapes_min <= s.shapes_max):
        raise ConfigError("synth.shapes_min/max must satisfy 1 <= min <= max")
    if s.visible_corruption not in CORRUPTIONS:
        raise ConfigError(f"synth.visible_corruption must be one of {CORRUPTIONS}")
    for c in s.thermal_classes:
        if not (1 <= c < cfg.num_classes):
            raise ConfigError(f"synth.thermal_classes entry {c} outside 1..{cfg.num_classes - 1}")

    a = cfg.augment
    if a.scale_min > a.scale_max or a.scale_min <= 0:
        raise ConfigError("augment scale range must be non-empty and positive")
    if a.crop_h < 8 or a.crop_w < 8:
        raise ConfigError("augment crop size must be at least 8")
    if a.brightness_min > a.brightness_max or a.brightness_min < 0:
        raise ConfigError("augment brightness range must be non-empty and non-negative")

    g = cfg.segnet
    if not (len(g.widths) == len(g.depths) == len(g.heads) == len(g.sr_ratios) == 4):
        raise ConfigError("segnet widths/depths/heads/sr_ratios must all have 4 stages")
    for w, h in zip(g.widths, g.heads):
        if w % h != 0:
            raise ConfigError(f"segnet width {w} not divisible by heads {h}")

    f = cfg.fusion
    if f.channels < 1 or f.growth < 1 or f.dense_layers < 1 or f.dilation < 1:
        raise ConfigError("fusion channels/growth/dense_layers/dilation must be positive")
    if not f.decoder_widths:
        raise ConfigError("fusion.decoder_widths must not be empty")

    i = cfg.interaction
    if i.channels % i.heads != 0:
        raise ConfigError("interaction.channels must be divisible by interaction.heads")
    if i.arrangement not in ARRANGEMENTS:
        raise ConfigError(f"interaction.arrangement must be one of {ARRANGEMENTS}")

    lo = cfg.loss
    if lo.ssim_window % 2 != 1 or lo.ssim_window < 3:
        raise ConfigError("loss.ssim_window must be odd and >= 3")
    if any(k % 2 != 1 or k < 3 for k in lo.grad_kernels):
        raise ConfigError("loss.grad_kernels must all be odd and >= 3")
    if lo.eta < 0:
        raise ConfigError("loss.eta must be non-negative")
    if lo.pixel_loss_form not in PIXEL_LOSS_FORMS:
        raise ConfigError(f"loss.pixel_loss_form must be one of {PIXEL_LOSS_FORMS}")

    sc = cfg.schedule
    if sc.rounds < 1 or sc.seg_iters < 0 or sc.fusion_iters < 0 or sc.batch_size < 1:
        raise ConfigError("schedule rounds/iters/batch_size out of range")
    if sc.strategy not in STRATEGIES:
        raise ConfigError(f"schedule.strategy must be one of {STRATEGIES}")
    if sc.temperature <= 0:
        raise ConfigError("schedule.temperature must be positive")
    if any(e <= 0 for e in sc.eta_pref):
        raise ConfigError("schedule.eta_pref entries must be positive")
    if sc.warmup_iters < 0 or sc.warmup_lr <= 0:
        raise ConfigError("schedule warmup settings out of range")
    for name in ("seg_lr", "seg_lr_end", "fusion_lr", "fusion_lr_end"):
        if getattr(sc, name) <= 0:
            raise ConfigError(f"schedule.{name} must be positive")
    if sc.poly_power <= 0:
        raise ConfigError("schedule.poly_power must be positive")
    if sc.clip_norm <= 0:
        raise ConfigError("schedule.clip_norm must be positive")
    return cfg


def from_dict(raw: dict) -> Config:
    return validate_config(_build(Config, raw, ""))


def to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | Path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return from_dict(raw)


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def desk_config() -> Config:
    """Small profile: full-scale iteration counts divided by 25, 96x96 images."""
    cfg = Config(
        seed=7,
        num_classes=4,
        synth=SynthConfig(image_size=(96, 96), train_scenes=16, val_scenes=4),
        augment=AugmentConfig(enabled=False, crop_h=96, crop_w=96),
        schedule=ScheduleConfig(
            rounds=2,
            seg_iters=400,
            fusion_iters=200,
            batch_size=4,
            warmup_iters=40,
            seg_lr=5e-4,
            seg_lr_end=1e-5,
        ),
    )
    return validate_config(cfg)
