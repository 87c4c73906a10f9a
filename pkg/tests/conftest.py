"""Shared builders for the test suite."""

import numpy as np

from stpool.grid import IGNORE, LabelMap
from stpool.synth import ObjectSpec, SceneSpec

TWO_CLASS_MEANS = ((0.0, 0.0, 0.0), (3.0, 1.0, -2.0))
THREE_CLASS_MEANS = TWO_CLASS_MEANS + ((-1.0, 4.0, 2.0),)


def demo_spec(**overrides) -> SceneSpec:
    """A small two-object scene; keyword overrides replace any field."""
    values = dict(
        frames=7,
        height=12,
        width=16,
        channels=3,
        background_class=0,
        noise_std=0.0,
        seed=5,
        class_means=THREE_CLASS_MEANS,
        objects=(
            ObjectSpec(x=2, y=1, h=4, w=5, vx=0, vy=1, cls=1, g=2),
            ObjectSpec(x=7, y=9, h=4, w=5, vx=0, vy=-1, cls=2, g=1),
        ),
    )
    values.update(overrides)
    return SceneSpec(**values)


def random_labels(rng, height, width, num_classes, p_ignore=0.0) -> LabelMap:
    labels = rng.integers(0, num_classes, size=(height, width)).astype(np.int64)
    if p_ignore > 0:
        labels[rng.random((height, width)) < p_ignore] = IGNORE
    return LabelMap(labels, num_classes)
