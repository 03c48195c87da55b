#!/usr/bin/env python3
"""
Experiment configuration: flat key=value text, one key per line.

    # comments and blank lines are ignored
    task = layout
    epochs = 40
    hidden_widths = 16,16

Keys not given take the defaults of the chosen task. Unknown or repeated
keys and badly typed values are rejected with the 1-based line number.
The resolved configuration is written back in sorted key order and is
enough to reproduce a run on its own.
"""

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from cimle_core import ConfigError, Rng
from datasynth import (
    MAX_LAYOUT_CLASSES,
    LayoutTaskSpec,
    default_gmm_spec,
    gen_gmm_dataset,
    gen_layout_dataset,
    load_dataset,
)
from generator import NOISE_LAYOUTS, GeneratorSpec
from imle import DISTANCES, TrainConfig
from rebalance import TOP_CATEGORIES


TASKS = ("gmm", "layout")
TRUE_WORDS = ("true", "yes", "on", "1")
FALSE_WORDS = ("false", "no", "off", "0")

TASK_DEFAULTS = {
    "layout": {},
    "gmm": {
        "epochs": 300,
        "batch_size": 64,
        "samples_per_example": 20,
        "inner_steps": 20,
        "inner_batch_size": 16,
        "learning_rate": 0.05,
        "rebalance": False,
        "distance": "l2",
        "seed_dim": 2,
        "noise_channels": 4,
        "hidden_widths": (64, 64),
        "encoder_widths": (16, 16),
        "refine_scales": 1,
        "height": 1,
        "width": 1,
        "num_classes": 4,
        "output_dir": "runs/gmm",
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "layout"
    dataset: str = ""
    dataset_seed: int = 0
    epochs: int = 40
    batch_size: int = 20
    samples_per_example: int = 8
    inner_steps: int = 8
    inner_batch_size: int = 4
    learning_rate: float = 0.01
    rebalance: bool = True
    distance: str = "perceptual"
    seed: int = 0
    noise_channels: int = 10
    seed_dim: int = 8
    hidden_widths: tuple = (16, 16)
    encoder_widths: tuple = (16, 16)
    refine_scales: int = 2
    noise_encoder: bool = True
    noise_layout: str = "per_pixel"
    height: int = 16
    width: int = 32
    metric_seed: int = 1
    eval_metric_seed: int = 2
    checkpoint_every: int = 0
    output_dir: str = "runs/layout"
    num_layouts: int = 8
    images_per_layout: int = 64
    num_classes: int = 4
    color_std: float = 0.02
    mode_skew: float = 0.0
    samples_per_condition: int = 64
    modes_per_condition: int = 3
    mode_std: float = 0.02

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}", key="task")
        if self.distance not in DISTANCES:
            raise ConfigError(f"distance must be one of {DISTANCES}", key="distance")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}", key="learning_rate")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", key="epochs")
        for key in ("batch_size", "samples_per_example", "inner_steps", "inner_batch_size",
                    "noise_channels", "seed_dim", "height", "width", "num_classes",
                    "num_layouts", "images_per_layout", "samples_per_condition"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}", key=key)
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0", key="checkpoint_every")
        for key in ("hidden_widths", "encoder_widths"):
            widths = getattr(self, key)
            if not widths or min(widths) < 1:
                raise ConfigError(f"{key} must be a non-empty list of counts >= 1", key=key)
        self._check_cross_fields()
        # what is left here comes from palette or mixture geometry
        try:
            self.generator_spec()
            self.train_config()
            if self.task == "layout":
                self.layout_spec()
            else:
                self.gmm_spec()
        except ValueError as e:
            raise ConfigError(str(e), key="mode_std" if self.task == "gmm" else "task") from e

    def _check_cross_fields(self):
        if self.inner_batch_size > self.batch_size:
            raise ConfigError(
                f"inner_batch_size {self.inner_batch_size} exceeds batch_size {self.batch_size}",
                key="inner_batch_size",
            )
        if self.refine_scales not in (1, 2):
            raise ConfigError(f"refine_scales must be 1 or 2, got {self.refine_scales}", key="refine_scales")
        if self.refine_scales == 2:
            for key in ("height", "width"):
                if getattr(self, key) % 2:
                    raise ConfigError(f"{key} must be even when refine_scales = 2", key=key)
        if self.noise_layout not in NOISE_LAYOUTS:
            raise ConfigError(f"noise_layout must be one of {NOISE_LAYOUTS}", key="noise_layout")
        if len(self.encoder_widths) != 2:
            raise ConfigError("encoder_widths needs exactly two hidden widths", key="encoder_widths")
        portions = min(TOP_CATEGORIES, self.num_classes)
        if self.rebalance and self.batch_size < portions:
            raise ConfigError(
                f"batch_size {self.batch_size} is smaller than the {portions} rebalancing portions",
                key="batch_size",
            )
        if self.task == "gmm":
            if self.modes_per_condition < 2:
                raise ConfigError("modes_per_condition must be >= 2", key="modes_per_condition")
            if self.mode_std < 0:
                raise ConfigError(f"mode_std must be >= 0, got {self.mode_std}", key="mode_std")
            return
        if not 2 <= self.num_classes <= MAX_LAYOUT_CLASSES:
            raise ConfigError(
                f"num_classes must be in [2, {MAX_LAYOUT_CLASSES}] for layouts", key="num_classes"
            )
        if self.color_std < 0:
            raise ConfigError("color_std must be >= 0", key="color_std")
        if not 0.0 <= self.mode_skew < 1.0:
            raise ConfigError(f"mode_skew must be in [0, 1), got {self.mode_skew}", key="mode_skew")

    # -- component views ----------------------------------------------------

    @property
    def output_channels(self):
        return 2 if self.task == "gmm" else 3

    def generator_spec(self):
        return GeneratorSpec(
            input_classes=self.num_classes,
            output_channels=self.output_channels,
            height=1 if self.task == "gmm" else self.height,
            width=1 if self.task == "gmm" else self.width,
            noise_channels=self.noise_channels,
            seed_dim=self.seed_dim,
            hidden_widths=self.hidden_widths,
            encoder_widths=self.encoder_widths,
            refine_scales=self.refine_scales,
            use_noise_encoder=self.noise_encoder,
            noise_layout=self.noise_layout,
        )

    def train_config(self, workers=1):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            samples_per_example=self.samples_per_example,
            inner_steps=self.inner_steps,
            inner_batch_size=self.inner_batch_size,
            learning_rate=self.learning_rate,
            rebalance=self.rebalance,
            distance=self.distance,
            seed=self.seed,
            metric_seed=self.metric_seed,
            checkpoint_every=self.checkpoint_every,
            workers=workers,
        )

    def layout_spec(self):
        return LayoutTaskSpec(
            height=self.height,
            width=self.width,
            num_classes=self.num_classes,
            num_layouts=self.num_layouts,
            images_per_layout=self.images_per_layout,
            color_std=self.color_std,
            mode_skew=self.mode_skew,
        )

    def gmm_spec(self):
        return default_gmm_spec(
            num_conditions=self.num_classes,
            modes_per_condition=self.modes_per_condition,
            mode_std=self.mode_std,
            samples_per_condition=self.samples_per_condition,
        )

    def build_dataset(self):
        """Load `dataset` when set, otherwise regenerate the toy task from dataset_seed."""
        if self.dataset:
            return load_dataset(self.dataset)
        rng = Rng(self.dataset_seed)
        if self.task == "gmm":
            return gen_gmm_dataset(self.gmm_spec(), rng)
        return gen_layout_dataset(self.layout_spec(), rng)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # -- text form -----------------------------------------------------------

    def to_text(self):
        values = dataclasses.asdict(self)
        return "".join(f"{key} = {format_value(values[key])}\n" for key in sorted(values))


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key, text):
    kind = FIELD_TYPES[key]
    if kind is bool:
        word = text.lower()
        if word in TRUE_WORDS:
            return True
        if word in FALSE_WORDS:
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is tuple:
        return tuple(int(part) for part in text.split(",") if part.strip())
    return text


def parse_config_text(text):
    lines = {}
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", line=number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}", line=number, key=key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", line=number, key=key)
        try:
            values[key] = parse_value(key, value)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}", line=number, key=key) from e
        lines[key] = number

    task = values.get("task", "layout")
    merged = dict(TASK_DEFAULTS.get(task, {}))
    merged.update(values)
    try:
        return ExperimentConfig(**merged)
    except ConfigError as e:
        raise ConfigError(e.message, line=lines.get(e.key), key=e.key) from e


def load_config(path, **overrides):
    """Parse a config file; keyword overrides (e.g. from CLI flags) win over file values."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    config = parse_config_text(text)
    changes = {k: v for k, v in overrides.items() if v is not None}
    return config.replace(**changes) if changes else config


def write_snapshot(config, path):
    Path(path).write_text(config.to_text())
