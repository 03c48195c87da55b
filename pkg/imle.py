#!/usr/bin/env python3
"""
IMLE objectives and the conditional IMLE training loop.

Each epoch:
  1. pick a batch S (rarity-weighted when rebalancing is on)
  2. for every i in S draw m latents and generate m candidates from x_i
     with the parameters frozen at the start of the epoch
  3. keep only the nearest candidate's latent, sigma(i) = argmin_j L(y_i, y~_ij)
  4. K times: pick S~ in S and take one gradient step on
     (1/|S~|) sum_{i in S~} L(y_i, T_theta(x_i, z_i,sigma(i)))
     with the current parameters and the cached latents

Matching is parallel over batch positions; every position draws from its
own child stream, so results do not depend on the worker count.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from cimle_core import (
    DivergenceError,
    ImageTensor,
    NonFiniteError,
    Rng,
    SemanticLayout,
    ShapeError,
)
from distance import FeatureExtractor, SquaredL2Distance, calibrate_lambda, make_distance
from generator import (
    apply_update,
    backward_batch,
    generate_batch,
    init_params,
    sample_noise_batch,
)
from rebalance import rarity_masks, rarity_scores, sample_batch


DISTANCES = ("perceptual", "l2")
LOG_COLUMNS = ["epoch", "mean_matched_distance", "mean_inner_loss"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    samples_per_example: int
    inner_steps: int
    inner_batch_size: int
    learning_rate: float
    rebalance: bool = False
    distance: str = "perceptual"
    seed: int = 0
    metric_seed: int = 1
    checkpoint_every: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        counts = {
            "batch_size": self.batch_size,
            "samples_per_example": self.samples_per_example,
            "inner_steps": self.inner_steps,
            "inner_batch_size": self.inner_batch_size,
            "workers": self.workers,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.inner_batch_size > self.batch_size:
            raise ValueError(
                f"inner batch size {self.inner_batch_size} exceeds batch size {self.batch_size}"
            )
        if not self.learning_rate > 0 or not np.isfinite(self.learning_rate):
            raise ValueError(f"learning rate must be a finite value > 0, got {self.learning_rate}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    @classmethod
    def full_scale_defaults(cls, epochs=1, **overrides):
        """|S|=400, m=10, K=10000, |S~|=1, eta=1e-5."""
        values = dict(
            epochs=epochs,
            batch_size=400,
            samples_per_example=10,
            inner_steps=10000,
            inner_batch_size=1,
            learning_rate=1e-5,
        )
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class MatchRecord:
    """Nearest candidate for one example; sigma is 1-based."""

    example_index: int
    sigma: int
    noise: np.ndarray
    distance: float

    def __post_init__(self):
        if self.sigma < 1:
            raise ValueError(f"sigma is 1-based, got {self.sigma}")
        if not self.distance >= 0:
            raise ValueError(f"matched distance must be >= 0, got {self.distance}")


def _images(values):
    if isinstance(values, ImageTensor):
        return values.data[None]
    if isinstance(values, (list, tuple)):
        return np.stack([v.data if isinstance(v, ImageTensor) else np.asarray(v) for v in values])
    return np.asarray(values, dtype=np.float64)


def _layouts(values):
    if isinstance(values, SemanticLayout):
        return values.data[None]
    if isinstance(values, (list, tuple)):
        return np.stack([v.data if isinstance(v, SemanticLayout) else np.asarray(v) for v in values])
    return np.asarray(values, dtype=np.float64)


def argmin_first(values):
    """Index of the smallest value, lowest index on ties; rejects non-finite input."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("cannot take the argmin of no candidates")
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("candidate distances contain non-finite values")
    return int(np.argmin(values))


def match(y, candidates, dist, mask=None, example_index=0, noises=None):
    """sigma(i) = argmin_j L(y_i, y~_ij) over m candidates."""
    target = _images(y)
    candidates = _images(candidates)
    if candidates.shape[0] < 1:
        raise ValueError("match needs m >= 1 candidates")
    distances = dist.batch(target, candidates, mask)
    best = argmin_first(distances)
    noise = None if noises is None else np.asarray(noises[best])
    return MatchRecord(example_index, best + 1, noise, float(distances[best]))


def conditional_objective(state, layouts, targets, noise_sets, dist, masks=None):
    """(1/n) sum_i min_j L(T(x_i, z_ij), y_i); candidates for i come from x_i only."""
    layouts = _layouts(layouts)
    targets = _images(targets)
    noise_sets = np.asarray(noise_sets, dtype=np.float64)
    n = targets.shape[0]
    if layouts.shape[0] != n or noise_sets.shape[0] != n:
        raise ShapeError("layouts, targets and noise sets need one entry per example")
    total = 0.0
    for i in range(n):
        m = noise_sets.shape[1]
        candidates = generate_batch(state, np.repeat(layouts[i:i + 1], m, axis=0), noise_sets[i])
        mask = None if masks is None else masks[i]
        total += float(np.min(dist.batch(targets[i:i + 1], candidates, mask)))
    return total / n


def default_layout(spec):
    """All pixels in class 0; conditioning input for the unconditional objective."""
    layout = np.zeros((spec.height, spec.width, spec.input_classes))
    layout[..., 0] = 1.0
    return layout


def unconditional_objective(state, noises, targets, dist, layout=None):
    """(1/n) sum_i min_j L(T(z_j), y_i) with one z pool shared by every example."""
    noises = np.asarray(noises, dtype=np.float64)
    targets = _images(targets)
    if noises.shape[0] < 1 or targets.shape[0] < 1:
        raise ValueError("need m >= 1 latents and n >= 1 examples")
    layout = default_layout(state.spec) if layout is None else _layouts(layout)[0]
    samples = generate_batch(state, np.repeat(layout[None], noises.shape[0], axis=0), noises)
    per_example = [float(np.min(dist.batch(targets[i:i + 1], samples))) for i in range(targets.shape[0])]
    return float(np.mean(per_example))


def inner_step(state, layouts, targets, noises, masks, dist, learning_rate):
    """One update of the inner loop; returns (new_state, mean loss before the step)."""
    outputs = generate_batch(state, layouts, noises)
    losses, upstream = dist.gradient_batch(targets, outputs, masks)
    loss = float(np.mean(losses))
    if not np.isfinite(loss):
        raise DivergenceError("inner loss is not finite", state=state)
    grad = backward_batch(state, layouts, noises, upstream / targets.shape[0])
    return apply_update(state, grad, learning_rate), loss


@dataclass
class TrainResult:
    state: object
    log: pd.DataFrame
    timings: pd.DataFrame
    distance: object
    rarity: object = None
    matches: list = field(default_factory=list)


def run_metadata(distance, epoch):
    """Checkpoint header entries needed to rebuild the training distance."""
    meta = {"epoch": epoch, "distance": distance.name}
    if distance.name == "perceptual":
        meta["lambda"] = distance.weights.to_text()
        meta["extractor_seed"] = distance.extractor.seed
    return meta


class ConditionalImleTrainer:
    """Conditional IMLE training over one PairedDataset; construct, then call `run`."""

    def __init__(self, dataset, spec, config, rng=None):
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        if (dataset.height, dataset.width, dataset.num_classes) != (
            spec.height, spec.width, spec.input_classes
        ):
            raise ShapeError("dataset layouts do not match the generator spec")
        if dataset.channels != spec.output_channels:
            raise ShapeError(
                f"dataset images have {dataset.channels} channels, generator outputs {spec.output_channels}"
            )
        self.dataset = dataset
        self.spec = spec
        self.config = config
        self.rng = rng if rng is not None else Rng(config.seed)
        self.state = init_params(spec, self.rng.child("init"))
        self.rarity = rarity_scores(dataset) if config.rebalance else None
        self.distance = self._build_distance()

    def draw_batch(self, epoch):
        stream = self.rng.child("batch", epoch)
        if self.rarity is not None:
            return sample_batch(self.rarity, stream, self.config.batch_size)
        n = len(self.dataset)
        return stream.choice(n, self.config.batch_size, replace=self.config.batch_size > n)

    def _build_distance(self):
        if self.config.distance == "l2":
            return SquaredL2Distance()
        extractor = FeatureExtractor(
            self.config.metric_seed,
            self.spec.height,
            self.spec.width,
            self.spec.output_channels,
        )
        batch = self.draw_batch(1)
        noises = sample_noise_batch(self.spec, self.rng.child("calibration"), len(batch))
        generated = generate_batch(self.state, self.dataset.onehot(batch), noises)
        pairs = [(self.dataset.images[k], generated[s]) for s, k in enumerate(batch)]
        return make_distance("perceptual", extractor, calibrate_lambda(extractor, pairs))

    def _masks(self, batch):
        if self.rarity is None:
            return None
        return rarity_masks(self.rarity, self.dataset.labels[batch], batch)

    def match_batch(self, state, epoch, batch, layouts, targets, masks):
        """Matching phase against a frozen state, one child stream per batch position."""
        m = self.config.samples_per_example

        def match_position(s):
            noises = sample_noise_batch(self.spec, self.rng.child("noise", epoch, s), m)
            candidates = generate_batch(state, np.repeat(layouts[s:s + 1], m, axis=0), noises)
            mask = None if masks is None else masks[s]
            return match(targets[s], candidates, self.distance, mask, int(batch[s]), noises)

        positions = range(len(batch))
        if self.config.workers == 1:
            return [match_position(s) for s in positions]
        with ThreadPoolExecutor(max_workers=self.config.workers) as executor:
            return list(executor.map(match_position, positions))

    def run_epoch(self, epoch):
        batch = self.draw_batch(epoch)
        layouts = self.dataset.onehot(batch)
        targets = self.dataset.images[batch]
        masks = self._masks(batch)
        records = self.match_batch(self.state, epoch, batch, layouts, targets, masks)
        cached = np.stack([r.noise for r in records])

        state = self.state
        losses = []
        for k in range(1, self.config.inner_steps + 1):
            subset = self.rng.child("inner", epoch, k).choice(
                len(batch), self.config.inner_batch_size, replace=False
            )
            try:
                state, loss = inner_step(
                    state,
                    layouts[subset],
                    targets[subset],
                    cached[subset],
                    None if masks is None else masks[subset],
                    self.distance,
                    self.config.learning_rate,
                )
            except (DivergenceError, NonFiniteError) as e:
                raise DivergenceError(
                    f"epoch {epoch}, inner step {k}: {e}", state=state, epoch=epoch
                ) from e
            losses.append(loss)
        self.state = state
        return records, float(np.mean([r.distance for r in records])), float(np.mean(losses))

    def run(self, on_checkpoint=None):
        rows, timings = [], []
        records = []
        for epoch in range(1, self.config.epochs + 1):
            start = time.perf_counter()
            try:
                records, matched, inner = self.run_epoch(epoch)
            except DivergenceError as e:
                if e.epoch is not None:
                    raise
                raise DivergenceError(
                    f"epoch {epoch}: {e}", state=e.state or self.state, epoch=epoch
                ) from e
            except (NonFiniteError, ArithmeticError) as e:
                raise DivergenceError(f"epoch {epoch}: {e}", state=self.state, epoch=epoch) from e
            elapsed = (time.perf_counter() - start) * 1000.0
            rows.append([epoch, matched, inner])
            timings.append([epoch, elapsed])
            logger.info(
                "epoch %d/%d matched %.6g inner %.6g (%.0f ms)",
                epoch, self.config.epochs, matched, inner, elapsed,
            )
            every = self.config.checkpoint_every
            if on_checkpoint is not None and every and epoch % every == 0:
                on_checkpoint(epoch, self.state)
        return TrainResult(
            state=self.state,
            log=pd.DataFrame(rows, columns=LOG_COLUMNS),
            timings=pd.DataFrame(timings, columns=["epoch", "wallclock_ms"]),
            distance=self.distance,
            rarity=self.rarity,
            matches=records,
        )


def train(dataset, spec, config, rng=None, on_checkpoint=None):
    """Run conditional IMLE training; E=0 returns the initial state and an empty log."""
    return ConditionalImleTrainer(dataset, spec, config, rng).run(on_checkpoint)
