#!/usr/bin/env python3
"""
Dataset and loss rebalancing by appearance rarity.

For every category p and training image k:
  c_k(p)  average colour of the pixels labelled p (absent if none)
  D_p     Gaussian KDE fitted on {c_k(p) : p present in image k}
  R_p(k)  1 / D_p(c_k(p)), or 0 when p is absent from image k

Batches are split into equal portions over the largest-area categories
(up to five); within a portion, image k is drawn with probability
proportional to R_p(k). The loss mask of image k puts R_p(k) on every
pixel of class p, divided by its maximum.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.neighbors import KernelDensity

from cimle_core import ImageTensor, SemanticLayout, ShapeError, one_hot_batch


TOP_CATEGORIES = 5
MIN_BANDWIDTH = 1e-3

logger = logging.getLogger(__name__)


def average_color(x_k, y_k, p):
    """c_k(p) as a length-C array, or None when class p does not occur in x_k."""
    layout = x_k.data if isinstance(x_k, SemanticLayout) else np.asarray(x_k, dtype=np.float64)
    image = y_k.data if isinstance(y_k, ImageTensor) else np.asarray(y_k, dtype=np.float64)
    if layout.shape[:2] != image.shape[:2]:
        raise ShapeError(f"layout {layout.shape} and image {image.shape} disagree")
    weights = layout[..., p]
    total = weights.sum()
    if total == 0:
        return None
    return np.einsum("hw,hwc->c", weights, image) / total


class ColorDensity:
    """Isotropic Gaussian KDE over colour vectors, backed by sklearn's exact tree evaluation."""

    def __init__(self, centres, bandwidth):
        self.centres = np.atleast_2d(np.asarray(centres, dtype=np.float64))
        self.bandwidth = float(bandwidth)
        self._kde = KernelDensity(kernel="gaussian", bandwidth=self.bandwidth, rtol=0.0, atol=0.0)
        self._kde.fit(self.centres)

    def __repr__(self):
        return f"ColorDensity(n={len(self.centres)}, bandwidth={self.bandwidth:.6g})"

    def log_density(self, colors):
        colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
        if colors.shape[1] != self.centres.shape[1]:
            raise ShapeError(
                f"query dimension {colors.shape[1]} does not match centres {self.centres.shape[1]}"
            )
        return self._kde.score_samples(colors)

    def density(self, colors):
        colors = np.asarray(colors, dtype=np.float64)
        values = np.exp(self.log_density(colors))
        if colors.ndim == 1:
            return float(values[0])
        return values


def fit_kde(colors, bandwidth):
    """D(c) = (1/N) sum_k N(c; c_k, h^2 I)."""
    colors = np.asarray(colors, dtype=np.float64)
    if colors.size == 0:
        raise ValueError("cannot fit a KDE on an empty colour list")
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    return ColorDensity(colors, bandwidth)


def scott_bandwidth(colors):
    """Scott's rule N^(-1/(d+4)) times the mean per-axis std, floored at MIN_BANDWIDTH."""
    colors = np.atleast_2d(np.asarray(colors, dtype=np.float64))
    n, dim = colors.shape
    spread = float(colors.std(axis=0, ddof=1).mean()) if n > 1 else 0.0
    return max(n ** (-1.0 / (dim + 4)) * spread, MIN_BANDWIDTH)


def _color_columns(channels):
    if channels == 3:
        return ["avg_r", "avg_g", "avg_b"]
    return [f"avg_{c}" for c in range(channels)]


@dataclass
class RarityTable:
    """
    Per-(image, category) rebalancing statistics for one dataset.

    colors:     (n, P, C) average colours, NaN where absent
    present:    (n, P) bool
    densities:  (n, P) D_p(c_k(p)), NaN where absent
    scores:     (n, P) R_p(k), exactly 0 where absent
    area:       (P,) total pixel count per category
    """

    colors: np.ndarray
    present: np.ndarray
    densities: np.ndarray
    scores: np.ndarray
    area: np.ndarray
    bandwidths: np.ndarray

    @property
    def num_images(self):
        return self.scores.shape[0]

    @property
    def num_classes(self):
        return self.scores.shape[1]

    @property
    def top_categories(self):
        """Up to five present categories, by descending total area (ties to the lower id)."""
        order = sorted(range(self.num_classes), key=lambda p: (-self.area[p], p))
        return [p for p in order if self.area[p] > 0][:TOP_CATEGORIES]

    def sampling_weights(self, p):
        """Normalized R_p(k) over images, or None when every score is 0."""
        column = self.scores[:, p]
        total = column.sum()
        if total == 0:
            return None
        return column / total

    def to_frame(self):
        channels = self.colors.shape[2]
        rows = []
        for p in range(self.num_classes):
            for k in np.flatnonzero(self.present[:, p]):
                rows.append(
                    [p, int(k)] + list(self.colors[k, p]) + [self.densities[k, p], self.scores[k, p]]
                )
        columns = ["category", "image_index"] + _color_columns(channels) + ["density", "rarity"]
        return pd.DataFrame(rows, columns=columns)


def rarity_scores(dataset):
    """Fit one KDE per category on the images that contain it and score every image."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot compute rarity scores of an empty dataset")
    onehot = one_hot_batch(dataset.labels, dataset.num_classes)
    counts = onehot.sum(axis=(1, 2))
    sums = np.einsum("nhwp,nhwc->npc", onehot, dataset.images)
    present = counts > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        colors = sums / counts[..., None]
    colors[~present] = np.nan

    num_classes = dataset.num_classes
    densities = np.full((n, num_classes), np.nan)
    scores = np.zeros((n, num_classes))
    bandwidths = np.full(num_classes, np.nan)

    for p in range(num_classes):
        rows = np.flatnonzero(present[:, p])
        if rows.size == 0:
            continue
        centres = colors[rows, p]
        bandwidths[p] = scott_bandwidth(centres)
        density = fit_kde(centres, bandwidths[p])
        values = density.density(centres)
        densities[rows, p] = values
        scores[rows, p] = 1.0 / values
        logger.debug("class %d: %d images, bandwidth %.4g", p, rows.size, bandwidths[p])

    return RarityTable(
        colors=colors,
        present=present,
        densities=densities,
        scores=scores,
        area=counts.sum(axis=0),
        bandwidths=bandwidths,
    )


def portion_sizes(batch_size, num_portions=TOP_CATEGORIES):
    """Equal split; the remainder goes to the first (largest-area) portion."""
    if num_portions < 1:
        raise ValueError("need at least one portion")
    if batch_size < num_portions:
        raise ValueError(f"batch size {batch_size} is smaller than the {num_portions} portions")
    base, remainder = divmod(batch_size, num_portions)
    sizes = [base] * num_portions
    sizes[0] += remainder
    return sizes


def sample_batch(table, rng, batch_size):
    """Image indices for one batch, portion by portion in top-category order; duplicates allowed."""
    categories = table.top_categories
    if table.num_images == 0 or not categories:
        raise ValueError("cannot sample from an empty rarity table")
    picks = []
    for p, size in zip(categories, portion_sizes(batch_size, len(categories))):
        weights = table.sampling_weights(p)
        if weights is None:
            logger.warning("class %d has all-zero rarity scores, sampling its portion uniformly", p)
        picks.append(rng.child("portion", p).choice(table.num_images, size, p=weights))
    return np.concatenate(picks)


def _normalize_masks(masks):
    peaks = masks.max(axis=(1, 2))
    flat = peaks == 0
    if np.any(flat):
        logger.warning("%d rarity masks are all zero, using all-ones masks", int(flat.sum()))
        masks[flat] = 1.0
        peaks[flat] = 1.0
    return masks / peaks[:, None, None]


def rarity_mask(x_k, table, k):
    """M^k / max M^k where M^k holds R_p(k) on every pixel of class p."""
    if isinstance(x_k, SemanticLayout):
        labels = x_k.labels()
    else:
        labels = np.asarray(x_k)
        if labels.ndim == 3:
            labels = np.argmax(labels, axis=-1)
    return rarity_masks(table, labels[None], [k])[0]


def rarity_masks(table, label_maps, indices):
    """Batched masks for label maps (B, H, W) of dataset images `indices`."""
    label_maps = np.asarray(label_maps, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    if label_maps.shape[0] != indices.shape[0]:
        raise ShapeError("one dataset index is needed per label map")
    masks = table.scores[indices[:, None, None], label_maps].astype(np.float64)
    return _normalize_masks(masks)
