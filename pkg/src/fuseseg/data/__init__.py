from .images import (
    AlignedPair,
    Image,
    LabelMap,
    default_palette,
    load_image,
    load_label,
    load_pair,
    load_palette,
    render_label,
    rgb_to_ycbcr,
    save_image,
    save_palette,
    ycbcr_to_rgb,
)
from .augment import augment
from .synth import SynthSpec, synth_scene, write_dataset
from .dataset import PairDataset

__all__ = [
    "AlignedPair",
    "Image",
    "LabelMap",
    "PairDataset",
    "SynthSpec",
    "augment",
    "default_palette",
    "load_image",
    "load_label",
    "load_pair",
    "load_palette",
    "render_label",
    "rgb_to_ycbcr",
    "save_image",
    "save_palette",
    "synth_scene",
    "write_dataset",
    "ycbcr_to_rgb",
]
