#!/usr/bin/env python3
"""
Evaluation protocols for a trained generator:

- diversity_score:   mean pairwise held-out feature distance between samples
                     of the same input, averaged over inputs
- mode_coverage:     fraction of known modes hit within eps by N samples
- interpolate:       frames along a straight line between two latents
- style_consistency: one shared latent applied to several layouts

plus the palette-mode assignment used to check style consistency and the
mosaic / image export helpers.
"""

import logging
import math
from dataclasses import dataclass

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from cimle_core import (
    ImageTensor,
    NoiseField,
    NoiseSeed,
    SemanticLayout,
    ShapeError,
    one_hot_batch,
    to_uint8,
    write_ppm,
)
from generator import generate, generate_batch, sample_noise_batch


DEFAULT_PAIRS_PER_INPUT = 40
DEFAULT_NUM_INPUTS = 100

logger = logging.getLogger(__name__)


def _layout_array(layout):
    if isinstance(layout, SemanticLayout):
        return layout.data
    return np.asarray(layout, dtype=np.float64)


@dataclass(frozen=True)
class DiversityReport:
    per_input: np.ndarray
    pairs_per_input: int
    metric_seed: int = None

    @property
    def num_inputs(self):
        return len(self.per_input)

    @property
    def global_mean(self):
        return float(np.mean(self.per_input))

    def to_frame(self):
        return pd.DataFrame({
            "input_index": np.arange(self.num_inputs),
            "pairs": self.pairs_per_input,
            "mean_pairwise_distance": self.per_input,
        })


def diversity_score(state, layouts, pairs_per_input, metric, rng):
    """For every input, 2*pairs independent latents paired as (0,1), (2,3), ..."""
    if pairs_per_input < 1:
        raise ValueError(f"pairs_per_input must be >= 1, got {pairs_per_input}")
    per_input = []
    for t, layout in enumerate(layouts):
        count = 2 * pairs_per_input
        noises = sample_noise_batch(state.spec, rng.child("diversity", t), count)
        onehot = np.repeat(_layout_array(layout)[None], count, axis=0)
        samples = generate_batch(state, onehot, noises)
        per_input.append(float(np.mean(metric.batch(samples[0::2], samples[1::2]))))
    seed = getattr(getattr(metric, "extractor", None), "seed", None)
    return DiversityReport(np.array(per_input), pairs_per_input, seed)


def coverage_of_samples(samples, modes, eps):
    """(# modes with a sample within eps) / (# modes); eps-balls must not overlap."""
    samples = np.asarray(samples, dtype=np.float64)
    modes = np.asarray(modes, dtype=np.float64)
    samples = samples.reshape(samples.shape[0], -1)
    modes = modes.reshape(modes.shape[0], -1)
    if samples.shape[1] != modes.shape[1]:
        raise ShapeError(f"samples of dim {samples.shape[1]} vs modes of dim {modes.shape[1]}")
    if modes.shape[0] > 1:
        gaps = np.linalg.norm(modes[:, None] - modes[None], axis=-1)
        closest = gaps[~np.eye(len(modes), dtype=bool)].min()
        if 2 * eps >= closest:
            raise ValueError(f"eps={eps} balls overlap (closest modes {closest:.4g} apart)")
    if samples.shape[0] == 0:
        return 0.0
    distances = np.linalg.norm(samples[:, None] - modes[None], axis=-1)
    hit = np.any(distances <= eps, axis=0)
    return float(hit.mean())


def condition_layout(spec, condition):
    """Layout whose every pixel is class `condition`."""
    if isinstance(condition, SemanticLayout):
        return condition.data
    labels = np.full((spec.height, spec.width), int(condition))
    return one_hot_batch(labels, spec.input_classes)


def mode_coverage(state, condition, true_modes, eps, n_samples, rng):
    if n_samples < 1:
        raise ValueError(f"need N >= 1 samples, got {n_samples}")
    layout = condition_layout(state.spec, condition)
    noises = sample_noise_batch(state.spec, rng, n_samples)
    samples = generate_batch(state, np.repeat(layout[None], n_samples, axis=0), noises)
    return coverage_of_samples(samples, true_modes, eps)


def coverage_report(state, dataset, eps, n_samples, rng):
    """Coverage for every condition of a gmm dataset, using its mode table."""
    rows = []
    for condition in range(dataset.num_classes):
        modes = dataset.mode_table(condition)
        value = mode_coverage(state, condition, modes, eps, n_samples, rng.child("coverage", condition))
        rows.append([condition, len(modes), n_samples, eps, value])
    return pd.DataFrame(rows, columns=["condition", "num_modes", "samples", "epsilon", "coverage"])


def _latent_values(noise):
    if isinstance(noise, (NoiseSeed, NoiseField)):
        return noise.values
    return np.asarray(noise, dtype=np.float64)


def interpolate(state, x, z_a, z_b, steps):
    """Frames at alpha = i/(steps-1); frame 0 and the last frame are generated at z_a and z_b exactly."""
    if steps < 2:
        raise ValueError(f"interpolation needs steps >= 2, got {steps}")
    a, b = _latent_values(z_a), _latent_values(z_b)
    if a.shape != b.shape or a.shape != state.spec.latent_shape():
        raise ShapeError(
            f"latents {a.shape} and {b.shape} must both be {state.spec.latent_shape()}"
        )
    frames = []
    for i in range(steps):
        alpha = i / (steps - 1)
        frames.append(generate(state, x, (1.0 - alpha) * a + alpha * b))
    return frames


def style_consistency(state, layouts, z_seed):
    """One image per layout, all from the same latent."""
    return [generate(state, layout, z_seed) for layout in layouts]


def assign_palette_modes(image, label_map, modes):
    """Nearest palette mode of each present class's average colour, as {class: mode_id}."""
    data = image.data if isinstance(image, ImageTensor) else np.asarray(image)
    label_map = np.asarray(label_map)
    assignment = {}
    for class_id in np.unique(label_map):
        rows = modes[modes["class"] == class_id].sort_values("mode_id")
        centres = rows[[c for c in modes.columns if c.startswith("v")]].to_numpy()
        colour = data[label_map == class_id].mean(axis=0)
        assignment[int(class_id)] = int(rows["mode_id"].iloc[np.argmin(np.linalg.norm(centres - colour, axis=1))])
    return assignment


def palette_disagreement(images, label_maps, modes):
    """Mean over image pairs of the fraction of shared classes painted in different modes."""
    assignments = [assign_palette_modes(img, lab, modes) for img, lab in zip(images, label_maps)]
    fractions = []
    for a in range(len(assignments)):
        for b in range(a + 1, len(assignments)):
            shared = set(assignments[a]) & set(assignments[b])
            if shared:
                fractions.append(np.mean([assignments[a][p] != assignments[b][p] for p in shared]))
    if not fractions:
        raise ValueError("no image pair shares a class")
    return float(np.mean(fractions))


def mosaic(images, cols=None):
    """Row-major tiling; empty cells stay black."""
    arrays = [img.data if isinstance(img, ImageTensor) else np.asarray(img) for img in images]
    if not arrays:
        raise ValueError("cannot build a mosaic of zero images")
    count = len(arrays)
    cols = cols or int(math.ceil(math.sqrt(count)))
    rows = int(math.ceil(count / cols))
    height, width, channels = arrays[0].shape
    grid = np.zeros((rows * height, cols * width, channels))
    for index, array in enumerate(arrays):
        r, c = divmod(index, cols)
        grid[r * height:(r + 1) * height, c * width:(c + 1) * width] = array
    return grid


def save_image(path, image):
    """Write .ppm (P6) or .png by suffix."""
    path = str(path)
    if path.endswith(".ppm"):
        write_ppm(path, image)
    elif path.endswith(".png"):
        plt.imsave(path, to_uint8(image))
    else:
        raise ValueError(f"unsupported image format for {path}")
