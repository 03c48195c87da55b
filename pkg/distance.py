#!/usr/bin/env python3
"""
Distance metrics L(y, y^) used for matching and for the inner updates.

PerceptualDistance is a weighted multi-layer L1 feature distance:

    L(y, y^) = sum_i lambda_i * || M_i o (Phi_i(y) - Phi_i(y^)) ||_1

where Phi_1..Phi_5 come from a frozen pyramid of random 3x3 filter banks
(leaky rectifier, 2x2 average pooling between layers) and M_i is the
optional rarity mask area-averaged down to layer i's size.

SquaredL2Distance is the plain sum of squared differences, optionally
weighted per pixel by the same mask.

Both expose batched evaluation plus the gradient w.r.t. y^, which the
trainer chains into generator.backward_batch.
"""

import logging
from dataclasses import dataclass

import numpy as np

from cimle_core import CimleError, ImageTensor, Rng, ShapeError, require_finite
from conv_ops import (
    avg_pool2,
    avg_pool2_backward,
    conv3x3,
    conv3x3_backward,
    leaky_relu,
    leaky_relu_backward,
    pooled_size,
)


DEFAULT_FEATURE_WIDTHS = (8, 16, 16, 32, 32)

logger = logging.getLogger(__name__)


class CalibrationError(CimleError, ValueError):
    """A layer has zero mean difference over the calibration pairs."""


def _image_array(value):
    if isinstance(value, ImageTensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


class FeatureExtractor:
    """Fixed random filter pyramid Phi_1..Phi_l; filters never change after construction."""

    def __init__(self, seed, height, width, channels=3, widths=DEFAULT_FEATURE_WIDTHS):
        if min(height, width, channels) < 1 or not widths or min(widths) < 1:
            raise ValueError("feature extractor dimensions must all be >= 1")
        self.seed = int(seed)
        self.height = int(height)
        self.width = int(width)
        self.channels = int(channels)
        self.widths = tuple(int(w) for w in widths)
        stream = Rng(self.seed).child("features")
        filters = []
        previous = self.channels
        for index, width_out in enumerate(self.widths):
            w = stream.child(index).normal((previous, 3, 3, width_out)) / np.sqrt(9.0 * previous)
            w.setflags(write=False)
            filters.append(w)
            previous = width_out
        self._filters = tuple(filters)

    def __repr__(self):
        return (
            f"FeatureExtractor(seed={self.seed}, height={self.height}, "
            f"width={self.width}, widths={self.widths})"
        )

    @property
    def num_layers(self):
        return len(self.widths)

    @property
    def filters(self):
        return self._filters

    def layer_shapes(self):
        """(h_i, w_i, c_i) of every feature map; layer 1 is full resolution."""
        shapes = []
        h, w = self.height, self.width
        for index, width_out in enumerate(self.widths):
            if index > 0:
                h, w = pooled_size(h, w)
            shapes.append((h, w, width_out))
        return shapes

    def _check(self, ys):
        expected = (self.height, self.width, self.channels)
        if ys.ndim != 4 or ys.shape[1:] != expected:
            raise ShapeError(f"images must be (B,) + {expected}, got {ys.shape}")

    def extract_batch(self, ys, keep_trace=False):
        ys = np.asarray(ys, dtype=np.float64)
        self._check(ys)
        features, inputs, preacts = [], [], []
        h = ys
        for index, w in enumerate(self._filters):
            if index > 0:
                h = avg_pool2(h)
            inputs.append(h)
            a = conv3x3(h, w)
            preacts.append(a)
            h = leaky_relu(a)
            features.append(h)
        if keep_trace:
            return features, (inputs, preacts)
        return features

    def extract(self, y):
        """Feature maps Phi_i(y) for one image."""
        return [f[0] for f in self.extract_batch(_image_array(y)[None])]

    def backward_batch(self, trace, feature_grads):
        """Gradient w.r.t. the input images given d/dPhi_i for every layer."""
        inputs, preacts = trace
        g = np.zeros_like(preacts[-1])
        for index in reversed(range(self.num_layers)):
            g = g + feature_grads[index]
            g = leaky_relu_backward(preacts[index], g)
            g, _, _ = conv3x3_backward(inputs[index], self._filters[index], g, need_weights=False)
            if index > 0:
                g = avg_pool2_backward(g, preacts[index - 1].shape)
        return g


@dataclass(frozen=True)
class LayerWeights:
    """Per-layer weights lambda_1..lambda_l, all strictly positive."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if values.size < 1:
            raise ValueError("layer weights must not be empty")
        require_finite(values, "layer weights")
        if np.any(values <= 0):
            raise ValueError(f"layer weights must be > 0, got {values}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size

    def to_text(self):
        return ",".join(repr(float(v)) for v in self.values)

    @classmethod
    def from_text(cls, text):
        return cls(np.array([float(t) for t in text.split(",")]))


def _mask_batch(masks, batch, height, width):
    if masks is None:
        return None
    masks = np.asarray(masks, dtype=np.float64)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.ndim != 3 or masks.shape[1:] != (height, width) or masks.shape[0] not in (1, batch):
        raise ShapeError(f"mask must be (H, W) or (B, H, W) at {height}x{width}, got {masks.shape}")
    require_finite(masks, "mask")
    if np.any(masks <= 0) or np.any(masks > 1):
        raise ValueError("mask entries must lie in (0, 1]")
    return masks


def downsample_mask(masks, num_layers):
    """Area-average a (B, H, W) mask to every layer's resolution, as (B, h, w, 1) arrays."""
    level = np.asarray(masks, dtype=np.float64)[..., None]
    levels = [level]
    for _ in range(num_layers - 1):
        level = avg_pool2(level)
        levels.append(level)
    return levels


def _pair_batches(ys, ys_hat):
    ys = np.asarray(ys, dtype=np.float64)
    ys_hat = np.asarray(ys_hat, dtype=np.float64)
    if ys.ndim == 3:
        ys = ys[None]
    if ys_hat.ndim == 3:
        ys_hat = ys_hat[None]
    if ys.shape[1:] != ys_hat.shape[1:] or ys.shape[0] not in (1, ys_hat.shape[0]):
        raise ShapeError(f"target batch {ys.shape} does not pair with {ys_hat.shape}")
    require_finite(ys, "target image")
    require_finite(ys_hat, "generated image")
    return ys, ys_hat


class PerceptualDistance:
    """Weighted multi-layer L1 feature distance; callable on single images, batched via `batch`."""

    name = "perceptual"

    def __init__(self, extractor, weights):
        if len(weights) != extractor.num_layers:
            raise ShapeError(
                f"{len(weights)} layer weights for {extractor.num_layers} feature layers"
            )
        self.extractor = extractor
        self.weights = weights

    def _layer_terms(self, ys, ys_hat, masks, keep_trace=False):
        ys, ys_hat = _pair_batches(ys, ys_hat)
        masks = _mask_batch(masks, ys_hat.shape[0], ys_hat.shape[1], ys_hat.shape[2])
        target = self.extractor.extract_batch(ys)
        if keep_trace:
            generated, trace = self.extractor.extract_batch(ys_hat, keep_trace=True)
        else:
            generated, trace = self.extractor.extract_batch(ys_hat), None
        mask_levels = downsample_mask(masks, self.extractor.num_layers) if masks is not None else None
        diffs = [g - t for g, t in zip(generated, target)]
        return diffs, mask_levels, trace

    def batch(self, ys, ys_hat, masks=None):
        """Per-sample distances, shape (B,). `ys` and `masks` may have a batch axis of 1."""
        diffs, mask_levels, _ = self._layer_terms(ys, ys_hat, masks)
        total = np.zeros(diffs[0].shape[0])
        for index, (lam, diff) in enumerate(zip(self.weights.values, diffs)):
            weighted = np.abs(diff)
            if mask_levels is not None:
                weighted = mask_levels[index] * weighted
            total = total + lam * weighted.sum(axis=(1, 2, 3))
        return total

    def gradient_batch(self, ys, ys_hat, masks=None):
        """(distances, dL/dy^) with the L1 subgradient taken as 0 at ties."""
        diffs, mask_levels, trace = self._layer_terms(ys, ys_hat, masks, keep_trace=True)
        total = np.zeros(diffs[0].shape[0])
        feature_grads = []
        for index, (lam, diff) in enumerate(zip(self.weights.values, diffs)):
            weight = lam if mask_levels is None else lam * mask_levels[index]
            total = total + (weight * np.abs(diff)).sum(axis=(1, 2, 3))
            feature_grads.append(weight * np.sign(diff))
        return total, self.extractor.backward_batch(trace, feature_grads)

    def __call__(self, y, y_hat, mask=None):
        return float(self.batch(_image_array(y), _image_array(y_hat), mask)[0])

    def gradient(self, y, y_hat, mask=None):
        _, grad = self.gradient_batch(_image_array(y), _image_array(y_hat), mask)
        return grad[0]


class SquaredL2Distance:
    """Sum of squared differences, per-pixel weighted when a mask is given."""

    name = "l2"

    def batch(self, ys, ys_hat, masks=None):
        ys, ys_hat = _pair_batches(ys, ys_hat)
        masks = _mask_batch(masks, ys_hat.shape[0], ys_hat.shape[1], ys_hat.shape[2])
        squared = (ys_hat - ys) ** 2
        if masks is not None:
            squared = masks[..., None] * squared
        return squared.sum(axis=(1, 2, 3))

    def gradient_batch(self, ys, ys_hat, masks=None):
        ys, ys_hat = _pair_batches(ys, ys_hat)
        masks = _mask_batch(masks, ys_hat.shape[0], ys_hat.shape[1], ys_hat.shape[2])
        weight = 1.0 if masks is None else masks[..., None]
        diff = ys_hat - ys
        return (weight * diff ** 2).sum(axis=(1, 2, 3)), 2.0 * weight * diff

    def __call__(self, y, y_hat, mask=None):
        return float(self.batch(_image_array(y), _image_array(y_hat), mask)[0])

    def gradient(self, y, y_hat, mask=None):
        _, grad = self.gradient_batch(_image_array(y), _image_array(y_hat), mask)
        return grad[0]


def perceptual_distance(fe, weights, y, y_hat, mask=None):
    return PerceptualDistance(fe, weights)(y, y_hat, mask)


def l2_distance(a, b):
    a, b = _image_array(a), _image_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    return float(np.sum((a - b) ** 2))


def layer_differences(fe, y, y_hat):
    """Unweighted ||Phi_i(y) - Phi_i(y^)||_1 for every layer."""
    target = fe.extract(y)
    generated = fe.extract(y_hat)
    return np.array([np.abs(t - g).sum() for t, g in zip(target, generated)])


def lambda_from_layer_means(means):
    means = np.asarray(means, dtype=np.float64)
    if np.any(means <= 0):
        layer = int(np.argmax(means <= 0))
        raise CalibrationError(f"layer {layer + 1} has zero mean difference on the calibration set")
    return LayerWeights(1.0 / means)


def calibrate_lambda(fe, calibration_pairs):
    """lambda_i = 1 / mean ||Phi_i(y) - Phi_i(y^)||_1, so every layer contributes equally on average."""
    pairs = list(calibration_pairs)
    if not pairs:
        raise ValueError("calibration needs at least one (y, y^) pair")
    diffs = np.stack([layer_differences(fe, y, y_hat) for y, y_hat in pairs])
    weights = lambda_from_layer_means(diffs.mean(axis=0))
    logger.info("calibrated layer weights on %d pairs: %s", len(pairs), weights.to_text())
    return weights


def held_out_metric(seed, height, width, channels=3, widths=DEFAULT_FEATURE_WIDTHS):
    """
    Evaluation-only feature distance from an independent filter seed.
    Each layer is averaged over its elements instead of being calibrated.
    """
    fe = FeatureExtractor(seed, height, width, channels, widths)
    sizes = np.array([h * w * c for h, w, c in fe.layer_shapes()], dtype=np.float64)
    return PerceptualDistance(fe, LayerWeights(1.0 / sizes))


def make_distance(name, extractor=None, weights=None):
    if name == "l2":
        return SquaredL2Distance()
    if name == "perceptual":
        if extractor is None or weights is None:
            raise ValueError("perceptual distance needs an extractor and layer weights")
        return PerceptualDistance(extractor, weights)
    raise ValueError(f"unknown distance {name!r}")
