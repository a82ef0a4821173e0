"""Synthetic paired-modality scene generator.

Scenes place random rectangles and ellipses over textured backgrounds.  Each
shape carries a class id; the visible rendering gives every class a distinct
albedo (plus mild texture and an optional global corruption), while the
infrared rendering keeps the background flat and dim and paints shapes of the
configured thermal classes bright (>= 0.9 before bounded noise).  The same
draw order produces the label map, so occlusion is consistent across all
three outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import CORRUPTIONS
from ..errors import ConfigError
from .images import RGB, AlignedPair, Image, LabelMap, default_palette, render_label, save_image, save_palette

THERMAL_LEVEL = 0.95  # infrared rendering of thermal-class shapes, pre-noise
IR_NOISE = 0.02       # bounded, keeps thermal pixels >= 0.93


@dataclass
class SynthSpec:
    """Parameters for one generated scene (or a family sharing a seed)."""

    image_size: tuple[int, int] = (96, 96)
    num_classes: int = 4
    shapes_min: int = 2
    shapes_max: int = 5
    thermal_classes: tuple[int, ...] = (1,)
    visible_corruption: str = "NONE"
    seed: int = 0

    def __post_init__(self) -> None:
        self.image_size = tuple(self.image_size)
        self.thermal_classes = tuple(self.thermal_classes)
        if self.num_classes < 2:
            raise ConfigError("synth num_classes must be at least 2")
        if not (1 <= self.shapes_min <= self.shapes_max):
            raise ConfigError("shapes_min/shapes_max must satisfy 1 <= min <= max")
        if self.visible_corruption not in CORRUPTIONS:
            raise ConfigError(f"visible_corruption must be one of {CORRUPTIONS}")
        for c in self.thermal_classes:
            if not (1 <= c < self.num_classes):
                raise ConfigError(f"thermal class {c} outside 1..{self.num_classes - 1}")
        if self.image_size[0] < 8 or self.image_size[1] < 8:
            raise ConfigError("image_size must be at least 8x8")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))


def _smooth_field(shape: tuple[int, int], rng: np.random.Generator, components: int = 3) -> np.ndarray:
    """Zero-mean low-frequency cosine mixture in roughly [-1, 1]."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w), dtype=np.float64)
    for _ in range(components):
        fy = rng.uniform(0.5, 3.0) / h
        fx = rng.uniform(0.5, 3.0) / w
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.4, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def _shape_mask(spec_hw: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = spec_hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = rng.uniform(0.18, 0.82) * h
    cx = rng.uniform(0.18, 0.82) * w
    ry = rng.uniform(0.08, 0.17) * h
    rx = rng.uniform(0.08, 0.17) * w
    if rng.uniform() < 0.5:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _class_albedo(cls: int, num_classes: int, thermal: tuple[int, ...]) -> float:
    """Visible reflectance per class: evenly spaced, thermal classes brightest."""
    if cls in thermal:
        return 0.88
    others = [c for c in range(1, num_classes) if c not in thermal]
    rank = others.index(cls)
    if len(others) == 1:
        return 0.55
    return 0.30 + 0.45 * rank / (len(others) - 1)


def _ir_level(cls: int, num_classes: int, thermal: tuple[int, ...]) -> float:
    if cls in thermal:
        return THERMAL_LEVEL
    return 0.18 + 0.22 * cls / max(1, num_classes - 1)


def synth_scene(spec: SynthSpec, rng: np.random.Generator | None = None) -> tuple[AlignedPair, LabelMap]:
    """Generate one (visible, infrared, label) triple for a :class:`SynthSpec`."""
    if rng is None:
        rng = np.random.Generator(np.random.Philox(spec.seed))
    h, w = spec.image_size

    vis = 0.32 + 0.10 * _smooth_field((h, w), rng)
    ir = 0.10 + 0.04 * _smooth_field((h, w), rng)
    label = np.zeros((h, w), dtype=np.int64)

    n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, spec.num_classes))
        mask = _shape_mask((h, w), rng)
        if not mask.any():
            continue
        albedo = _class_albedo(cls, spec.num_classes, spec.thermal_classes)
        albedo += rng.uniform(-0.02, 0.02)
        texture = 0.03 * _smooth_field((h, w), rng)
        vis[mask] = albedo + texture[mask]
        if cls in spec.thermal_classes:
            ir[mask] = THERMAL_LEVEL
        else:
            ir[mask] = _ir_level(cls, spec.num_classes, spec.thermal_classes) + texture[mask]
        label[mask] = cls

    tint = rng.uniform(0.94, 1.0, size=3)
    visible = np.clip(vis[..., None] * tint[None, None, :], 0.0, 1.0)

    if spec.visible_corruption == "LOW_LIGHT":
        visible = visible * 0.2 + rng.normal(0.0, 0.02, size=visible.shape)
    elif spec.visible_corruption == "FOG":
        alpha = 0.5 + 0.15 * _smooth_field((h, w), rng)
        visible = visible * (1.0 - alpha[..., None]) + 0.8 * alpha[..., None]

    visible = visible + rng.uniform(-0.01, 0.01, size=visible.shape)
    ir = ir + rng.uniform(-IR_NOISE, IR_NOISE, size=ir.shape)

    pair = AlignedPair(
        visible=Image(np.clip(visible, 0.0, 1.0).astype(np.float32), RGB),
        infrared=Image(np.clip(ir, 0.0, 1.0).astype(np.float32)),
        pair_id=f"synth_{spec.seed}",
    )
    return pair, LabelMap(label, spec.num_classes, 255)


def write_dataset(
    root: str | Path,
    spec: SynthSpec,
    count: int,
    ignore_index: int = 255,
    prefix: str = "scene",
) -> list[str]:
    """Write ``count`` scenes under root/{Visible,Infrared,Label} plus palette.json."""
    root = Path(root)
    palette = default_palette(spec.num_classes, ignore_index)
    ids = []
    for i in range(count):
        child = np.random.Generator(np.random.Philox(key=[spec.seed, i]))
        pair, label = synth_scene(spec, child)
        scene_id = f"{prefix}_{i:04d}"
        save_image(root / "Visible" / f"{scene_id}.png", pair.visible.pixels)
        save_image(root / "Infrared" / f"{scene_id}.png", pair.infrared.pixels)
        rendered = render_label(LabelMap(label.classes, spec.num_classes, ignore_index), palette)
        save_image(root / "Label" / f"{scene_id}.png", rendered / 255.0)
        ids.append(scene_id)
    save_palette(root / "palette.json", palette)
    (root / "synth_spec.json").write_text(spec.to_json() + "\n")
    return ids
