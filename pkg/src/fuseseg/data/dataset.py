"""Directory-backed dataset of registered pairs with labels.

Layout: ``root/{Visible,Infrared,Label}/<id>.png`` with identical ids across
the three folders and a ``palette.json`` mapping label colors to class ids.
Desk-scale datasets are small, so everything is loaded eagerly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ..errors import IoError, ShapeMismatch
from .images import AlignedPair, LabelMap, load_label, load_pair, load_palette, luma


class PairDataset:
    def __init__(self, root: str | Path, num_classes: int, ignore_index: int = 255):
        self.root = Path(root)
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        vis_dir = self.root / "Visible"
        ir_dir = self.root / "Infrared"
        label_dir = self.root / "Label"
        for d in (vis_dir, ir_dir, label_dir):
            if not d.is_dir():
                raise IoError(f"dataset folder missing: {d}")
        self.palette = load_palette(self.root / "palette.json")
        self.ids = sorted(p.stem for p in vis_dir.glob("*.png"))
        if not self.ids:
            raise IoError(f"no visible images under {vis_dir}")
        self.pairs: list[AlignedPair] = []
        self.labels: list[LabelMap] = []
        for scene_id in self.ids:
            ir_path = ir_dir / f"{scene_id}.png"
            label_path = label_dir / f"{scene_id}.png"
            if not ir_path.is_file() or not label_path.is_file():
                raise IoError(f"scene {scene_id!r} missing infrared or label image")
            pair = load_pair(vis_dir / f"{scene_id}.png", ir_path, scene_id)
            label = load_label(label_path, num_classes, self.palette, ignore_index)
            if label.classes.shape != pair.infrared.pixels.shape:
                raise ShapeMismatch(f"scene {scene_id!r}: label size differs from images")
            self.pairs.append(pair)
            self.labels.append(label)

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, idx: int) -> tuple[AlignedPair, LabelMap]:
        return self.pairs[idx], self.labels[idx]

    def sample_tensors(self, idx: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(visible luma, infrared, label) tensors for one scene, unbatched."""
        pair, label = self[idx]
        x = torch.from_numpy(luma(pair.visible)).unsqueeze(0)
        y = torch.from_numpy(pair.infrared.pixels).unsqueeze(0)
        lab = torch.from_numpy(label.classes)
        return x, y, lab

    def batch_tensors(self, indices) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        xs, ys, labs = zip(*(self.sample_tensors(i) for i in indices))
        return torch.stack(xs), torch.stack(ys), torch.stack(labs)
