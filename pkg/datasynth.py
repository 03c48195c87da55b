#!/usr/bin/env python3
"""
Synthetic paired datasets with known ground-truth modes.

gmm:    every condition c has k output modes; samples are a uniformly
        chosen mode centre plus Gaussian noise truncated at radius 3*std,
        so each 3*std ball around a centre only holds that mode's samples.
        Stored as 1x1 "images" whose label is the condition id.

layout: procedural semantic layouts made of 2-4 horizontal or vertical
        bands of distinct classes; each image picks one palette mode per
        class (so appearance is consistent within an image) and adds
        per-pixel noise clipped to +-4*std.

Dataset directory format:
    labels.ciml        CIML1 uint8 label maps (n, H, W)
    images.ciml        CIML1 float64 images (n, H, W, C)
    metadata.csv       image_index, layout_index, class, mode_id
    modes.csv          class, mode_id, v0, v1, ...
    dataset_info.txt   key=value summary
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from cimle_core import PairedDataset, read_container, write_labels, write_tensor


MAX_LAYOUT_CLASSES = 8
MIN_PALETTE_SEPARATION = 0.3
MAX_BANDS = 4

# class name, colour modes
DEFAULT_PALETTE = (
    ("sky", ((0.35, 0.55, 0.85), (0.10, 0.10, 0.25), (0.90, 0.55, 0.30))),
    ("road", ((0.50, 0.50, 0.50), (0.15, 0.15, 0.15))),
    ("vegetation", ((0.20, 0.60, 0.20), (0.75, 0.55, 0.15))),
    ("building", ((0.70, 0.30, 0.25), (0.85, 0.85, 0.75))),
    ("car", ((0.80, 0.10, 0.10), (0.10, 0.20, 0.80))),
    ("sidewalk", ((0.65, 0.60, 0.55), (0.30, 0.25, 0.20))),
    ("sign", ((0.90, 0.85, 0.10), (0.10, 0.60, 0.60))),
    ("person", ((0.90, 0.70, 0.60), (0.35, 0.20, 0.15))),
)

logger = logging.getLogger(__name__)


def _mode_frame(mode_sets):
    rows = []
    for class_id, modes in enumerate(mode_sets):
        for mode_id, centre in enumerate(modes):
            rows.append([class_id, mode_id] + [float(v) for v in centre])
    dim = len(mode_sets[0][0])
    return pd.DataFrame(rows, columns=["class", "mode_id"] + [f"v{d}" for d in range(dim)])


# ---------------------------------------------------------------------------
# Conditional Gaussian mixture
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GmmTaskSpec:
    """centres: (num_conditions, k, D) mode centres."""

    centres: np.ndarray
    mode_std: float = 0.02
    samples_per_condition: int = 64

    def __post_init__(self):
        centres = np.array(self.centres, dtype=np.float64, copy=True)
        if centres.ndim != 3:
            raise ValueError("centres must be (num_conditions, k, D)")
        if centres.shape[1] < 2:
            raise ValueError(f"need k >= 2 modes per condition, got {centres.shape[1]}")
        if self.mode_std < 0 or self.samples_per_condition < 1:
            raise ValueError("mode_std must be >= 0 and samples_per_condition >= 1")
        for c, modes in enumerate(centres):
            gaps = np.linalg.norm(modes[:, None] - modes[None], axis=-1)
            closest = gaps[~np.eye(len(modes), dtype=bool)].min()
            if closest < 6 * self.mode_std:
                raise ValueError(
                    f"condition {c}: modes {closest:.4g} apart, need >= 6*std = {6 * self.mode_std:.4g}"
                )
        centres.setflags(write=False)
        object.__setattr__(self, "centres", centres)

    @property
    def num_conditions(self):
        return self.centres.shape[0]

    @property
    def modes_per_condition(self):
        return self.centres.shape[1]

    @property
    def dim(self):
        return self.centres.shape[2]


def default_gmm_spec(num_conditions=4, modes_per_condition=3, mode_std=0.02,
                     samples_per_condition=64, dim=2):
    """Modes evenly spaced on a circle of radius 0.35 around 0.5, rotated per condition."""
    centres = np.full((num_conditions, modes_per_condition, dim), 0.5)
    for c in range(num_conditions):
        offset = np.pi * c / (modes_per_condition * num_conditions)
        angles = 2 * np.pi * np.arange(modes_per_condition) / modes_per_condition + offset
        centres[c, :, 0] += 0.35 * np.cos(angles)
        if dim > 1:
            centres[c, :, 1] += 0.35 * np.sin(angles)
    return GmmTaskSpec(centres, mode_std, samples_per_condition)


def gen_gmm_dataset(spec, rng):
    n = spec.num_conditions * spec.samples_per_condition
    conditions = np.repeat(np.arange(spec.num_conditions), spec.samples_per_condition)
    mode_ids = rng.child("modes").integers(spec.modes_per_condition, size=n)
    noise = rng.child("noise").normal((n, spec.dim)) * spec.mode_std
    radius = np.linalg.norm(noise, axis=1, keepdims=True)
    limit = 3.0 * spec.mode_std
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(radius > limit, limit / radius, 1.0)
    values = spec.centres[conditions, mode_ids] + noise * scale

    metadata = pd.DataFrame({
        "image_index": np.arange(n),
        "layout_index": conditions,
        "class": conditions,
        "mode_id": mode_ids,
    })
    return PairedDataset(
        task="gmm",
        labels=conditions.reshape(n, 1, 1),
        images=values.reshape(n, 1, 1, spec.dim),
        num_classes=spec.num_conditions,
        metadata=metadata,
        modes=_mode_frame(spec.centres),
        info={
            "num_conditions": spec.num_conditions,
            "modes_per_condition": spec.modes_per_condition,
            "mode_std": spec.mode_std,
            "samples_per_condition": spec.samples_per_condition,
        },
    )


# ---------------------------------------------------------------------------
# Semantic layouts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayoutTaskSpec:
    height: int = 16
    width: int = 32
    num_classes: int = 4
    palettes: tuple = None
    num_layouts: int = 8
    images_per_layout: int = 64
    color_std: float = 0.02
    mode_skew: float = 0.0
    skew_class: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= MAX_LAYOUT_CLASSES:
            raise ValueError(f"num_classes must be in [2, {MAX_LAYOUT_CLASSES}], got {self.num_classes}")
        if self.height < 2 or self.width < 2:
            raise ValueError("layouts need at least 2x2 pixels to hold two bands")
        if self.num_layouts < 1 or self.images_per_layout < 1:
            raise ValueError("num_layouts and images_per_layout must be >= 1")
        if self.color_std < 0:
            raise ValueError("color_std must be >= 0")
        if not 0.0 <= self.mode_skew < 1.0:
            raise ValueError(f"mode_skew must be in [0, 1), got {self.mode_skew}")
        palettes = self.palettes
        if palettes is None:
            palettes = tuple(modes for _, modes in DEFAULT_PALETTE[:self.num_classes])
        palettes = tuple(tuple(tuple(float(v) for v in mode) for mode in modes) for modes in palettes)
        if len(palettes) != self.num_classes:
            raise ValueError(f"{len(palettes)} palettes for {self.num_classes} classes")
        for class_id, modes in enumerate(palettes):
            array = np.asarray(modes)
            if array.ndim != 2 or array.shape[0] < 1 or array.shape[1] != 3:
                raise ValueError(f"class {class_id}: palette must be a list of RGB triples")
            if np.any(array < 0.0) or np.any(array > 1.0):
                raise ValueError(f"class {class_id}: palette modes must lie in [0, 1]")
            for a in range(len(array)):
                for b in range(a + 1, len(array)):
                    if np.max(np.abs(array[a] - array[b])) < MIN_PALETTE_SEPARATION:
                        raise ValueError(
                            f"class {class_id}: modes {a} and {b} closer than "
                            f"{MIN_PALETTE_SEPARATION} in max-norm"
                        )
        if self.mode_skew and len(palettes[self.skew_class]) < 2:
            raise ValueError("mode_skew needs a skew class with at least two modes")
        object.__setattr__(self, "palettes", palettes)

    def mode_probabilities(self, class_id):
        k = len(self.palettes[class_id])
        if not self.mode_skew or class_id != self.skew_class:
            return np.full(k, 1.0 / k)
        rest = (1.0 - self.mode_skew) / (k - 1)
        return np.array([self.mode_skew] + [rest] * (k - 1))


def random_band_layout(spec, rng):
    """Label map of 2..min(4, P) horizontal or vertical bands of distinct classes."""
    vertical = bool(rng.integers(2))
    length = spec.width if vertical else spec.height
    most = min(MAX_BANDS, spec.num_classes, length)
    bands = int(rng.integers(most + 1, low=2))
    classes = rng.choice(spec.num_classes, bands, replace=False)
    cuts = np.sort(rng.choice(length - 1, bands - 1, replace=False) + 1)
    band_of = np.searchsorted(cuts, np.arange(length), side="right")
    line = classes[band_of]
    if vertical:
        return np.tile(line[None, :], (spec.height, 1)).astype(np.uint8)
    return np.tile(line[:, None], (1, spec.width)).astype(np.uint8)


def paint_layout(spec, label_map, rng):
    """One image for a label map; returns (image, per-class mode ids)."""
    mode_ids = np.array([
        rng.child("mode", p).choice(len(spec.palettes[p]), None, p=spec.mode_probabilities(p))
        for p in range(spec.num_classes)
    ])
    palette = np.zeros((spec.num_classes, 3))
    for p in range(spec.num_classes):
        palette[p] = spec.palettes[p][mode_ids[p]]
    limit = 4.0 * spec.color_std
    noise = np.clip(rng.child("pixels").normal(label_map.shape + (3,)) * spec.color_std, -limit, limit)
    image = np.clip(palette[label_map] + noise, 0.0, 1.0)
    return image, mode_ids


def gen_layout_dataset(spec, rng):
    layouts = [random_band_layout(spec, rng.child("layout", index)) for index in range(spec.num_layouts)]
    labels, images, rows = [], [], []
    for layout_index, label_map in enumerate(layouts):
        present = np.unique(label_map)
        for t in range(spec.images_per_layout):
            image, mode_ids = paint_layout(spec, label_map, rng.child("image", layout_index, t))
            image_index = len(images)
            labels.append(label_map)
            images.append(image)
            for p in present:
                rows.append([image_index, layout_index, int(p), int(mode_ids[p])])

    info = {
        "num_layouts": spec.num_layouts,
        "images_per_layout": spec.images_per_layout,
        "color_std": spec.color_std,
        "mode_skew": spec.mode_skew,
        "skew_class": spec.skew_class,
    }
    logger.info("generated %d layout images over %d layouts", len(images), spec.num_layouts)
    return PairedDataset(
        task="layout",
        labels=np.stack(labels),
        images=np.stack(images),
        num_classes=spec.num_classes,
        metadata=pd.DataFrame(rows, columns=["image_index", "layout_index", "class", "mode_id"]),
        modes=_mode_frame(spec.palettes),
        info=info,
    )


# ---------------------------------------------------------------------------
# Directory format
# ---------------------------------------------------------------------------

def save_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_labels(directory / "labels.ciml", dataset.labels)
    write_tensor(directory / "images.ciml", dataset.images)
    dataset.metadata.to_csv(directory / "metadata.csv", index=False)
    dataset.modes.to_csv(directory / "modes.csv", index=False, float_format="%.17g")
    info = {"task": dataset.task, "num_classes": dataset.num_classes, "num_images": len(dataset)}
    info.update(dataset.info)
    with open(directory / "dataset_info.txt", "w") as f:
        for key, value in info.items():
            f.write(f"{key}={value}\n")
    return directory


def read_info(path):
    info = {}
    with open(path, "r") as f:
        for line in f:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                info[key] = value
    return info


def load_dataset(directory):
    directory = Path(directory)
    if not (directory / "labels.ciml").exists():
        raise FileNotFoundError(f"no dataset found in {directory}")
    info = read_info(directory / "dataset_info.txt")
    task = info.pop("task")
    num_classes = int(info.pop("num_classes"))
    info.pop("num_images", None)
    return PairedDataset(
        task=task,
        labels=read_container(directory / "labels.ciml"),
        images=read_container(directory / "images.ciml"),
        num_classes=num_classes,
        metadata=pd.read_csv(directory / "metadata.csv"),
        modes=pd.read_csv(directory / "modes.csv", float_precision="round_trip"),
        info=info,
    )
