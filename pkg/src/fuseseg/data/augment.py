"""Paired training augmentation: random resize, crop and brightness.

One geometric transform is sampled per call and applied identically to the
visible image, the infrared image and the label map; images interpolate
bilinearly while labels use nearest neighbor so class ids never blend.
Brightness jitter is multiplicative and applied to the images only.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..config import AugmentConfig
from ..errors import ConfigError
from .images import GRAY, AlignedPair, Image, LabelMap


def _resize(arr: np.ndarray, size: tuple[int, int], mode: str) -> np.ndarray:
    if arr.shape[:2] == size:
        return arr.copy()
    chan_last = arr.ndim == 3
    t = torch.from_numpy(np.ascontiguousarray(arr))
    t = t.permute(2, 0, 1) if chan_last else t.unsqueeze(0)
    t = t.unsqueeze(0).float()
    if mode == "bilinear":
        out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    else:
        out = F.interpolate(t, size=size, mode="nearest-exact")
    out = out.squeeze(0)
    out = out.permute(1, 2, 0) if chan_last else out.squeeze(0)
    return out.numpy()


def _pad_to(arr: np.ndarray, size: tuple[int, int], value: float) -> np.ndarray:
    ph = max(0, size[0] - arr.shape[0])
    pw = max(0, size[1] - arr.shape[1])
    if ph == 0 and pw == 0:
        return arr
    widths = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, widths, mode="constant", constant_values=value)


def augment(
    pair: AlignedPair,
    label: LabelMap,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[AlignedPair, LabelMap]:
    """Apply one random resize/crop/brightness draw to a (pair, label) sample."""
    if pair.visible.pixels.shape[:2] != label.classes.shape:
        raise ConfigError("pair and label dimensions differ")
    if not cfg.enabled:
        return pair, label

    vis = pair.visible.pixels
    ir = pair.infrared.pixels
    lab = label.classes

    ratio = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    if ratio != 1.0:
        h = max(1, int(round(lab.shape[0] * ratio)))
        w = max(1, int(round(lab.shape[1] * ratio)))
        vis = _resize(vis, (h, w), "bilinear")
        ir = _resize(ir, (h, w), "bilinear")
        lab = _resize(lab.astype(np.float32), (h, w), "nearest").astype(np.int64)

    crop = (cfg.crop_h, cfg.crop_w)
    vis = _pad_to(vis, crop, 0.0)
    ir = _pad_to(ir, crop, 0.0)
    lab = _pad_to(lab, crop, float(label.ignore_index))
    top = int(rng.integers(0, lab.shape[0] - crop[0] + 1))
    left = int(rng.integers(0, lab.shape[1] - crop[1] + 1))
    vis = vis[top : top + crop[0], left : left + crop[1]]
    ir = ir[top : top + crop[0], left : left + crop[1]]
    lab = lab[top : top + crop[0], left : left + crop[1]]

    if cfg.brightness:
        fv = float(rng.uniform(cfg.brightness_min, cfg.brightness_max))
        fi = float(rng.uniform(cfg.brightness_min, cfg.brightness_max))
        vis = np.clip(vis * fv, 0.0, 1.0)
        ir = np.clip(ir * fi, 0.0, 1.0)

    vis = np.clip(np.asarray(vis, dtype=np.float32), 0.0, 1.0)
    ir = np.clip(np.asarray(ir, dtype=np.float32), 0.0, 1.0)
    out_pair = AlignedPair(
        visible=Image(vis, pair.visible.color_space if vis.ndim == 3 else GRAY),
        infrared=Image(ir, GRAY),
        pair_id=pair.pair_id,
    )
    return out_pair, LabelMap(lab, label.num_classes, label.ignore_index)
