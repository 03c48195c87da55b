"""Shared fixtures; the modules live flat in the repository root."""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from cimle_core import Rng, one_hot_batch  # noqa: E402
from datasynth import LayoutTaskSpec, gen_layout_dataset  # noqa: E402
from generator import GeneratorSpec  # noqa: E402


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_spec():
    return GeneratorSpec(
        input_classes=3,
        output_channels=3,
        height=4,
        width=4,
        noise_channels=2,
        seed_dim=2,
        hidden_widths=(3, 3),
        encoder_widths=(3, 3),
        refine_scales=2,
    )


def random_layouts(spec, rng, count):
    labels = rng.integers(spec.input_classes, size=(count, spec.height, spec.width))
    return one_hot_batch(labels, spec.input_classes)


@pytest.fixture
def tiny_layouts(tiny_spec, rng):
    return random_layouts(tiny_spec, rng.child("layouts"), 4)


@pytest.fixture
def tiny_layout_dataset():
    spec = LayoutTaskSpec(height=4, width=8, num_classes=3, num_layouts=2, images_per_layout=6)
    return gen_layout_dataset(spec, Rng(7))
