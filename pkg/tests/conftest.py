from __future__ import annotations

import numpy as np
import pytest
import torch

from fuseseg.config import desk_config
from fuseseg.data.images import luma
from fuseseg.data.synth import SynthSpec, synth_scene


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.Philox(key=[1234, 0]))


def make_scene(seed: int = 0, size: tuple[int, int] = (96, 96), num_classes: int = 4):
    """One synthetic scene as (x, y, label) with x/y float32 arrays in [0, 1]."""
    spec = SynthSpec(
        image_size=size,
        num_classes=num_classes,
        shapes_min=2,
        shapes_max=5,
        thermal_classes=(1,),
        visible_corruption="NONE",
        seed=seed,
    )
    gen = np.random.Generator(np.random.Philox(key=[spec.seed, 0]))
    pair, label = synth_scene(spec, gen)
    return luma(pair.visible), pair.infrared.pixels, label.classes


@pytest.fixture()
def scene():
    return make_scene()


@pytest.fixture()
def desk_cfg():
    return desk_config()
