#!/usr/bin/env python3
"""
Shared value types, encodings and seeded randomness for conditional IMLE.

Everything here is 64-bit and immutable after construction:
- SemanticLayout: H x W x P one-hot class map (the conditioning input x)
- ImageTensor:    H x W x C real image (targets y and generated samples)
- NoiseSeed:      low-dimensional latent vector fed to the noise encoder
- NoiseField:     full-size H x W x C_z noise channels
- PairedDataset:  n label maps with their images plus mode metadata

Label maps and tensors are stored in the CIML1 container:
    magic "CIML1" | kind byte ('L' = uint8 ids, 'T' = float64) |
    ndim (int32 LE) | dims (int32 LE each) | row-major payload (LE)
"""

import logging
import os
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd


LOG_ENV_VAR = "CIMLE_LOG"

CONTAINER_MAGIC = b"CIML1"
KIND_LABELS = b"L"
KIND_TENSOR = b"T"

logger = logging.getLogger(__name__)


class CimleError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CimleError, ValueError):
    """Array shapes disagree with what an operation requires."""


class ClassIdError(ShapeError):
    """A label map holds a class id outside [0, num_classes)."""

    def __init__(self, coordinate, class_id, num_classes):
        self.coordinate = tuple(int(c) for c in coordinate)
        self.class_id = int(class_id)
        self.num_classes = int(num_classes)
        super().__init__(
            f"class id {self.class_id} at {self.coordinate} "
            f"is outside [0, {self.num_classes})"
        )


class NonFiniteError(CimleError, ValueError):
    """NaN or inf where finite values are required."""


class ConfigError(CimleError, ValueError):
    """Invalid experiment configuration. `line` is 1-based when known."""

    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        self.message = message
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


class DivergenceError(CimleError, ArithmeticError):
    """Training produced a non-finite value. `state` is the last finite state."""

    def __init__(self, message, state=None, epoch=None):
        self.state = state
        self.epoch = epoch
        super().__init__(message)


class CorruptFileError(CimleError):
    """A container or checkpoint failed its magic, length or CRC check."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_CORRUPT = 4


def exit_code_for(error):
    """Map an exception raised inside a command to the scripts' exit-code contract."""
    if isinstance(error, CorruptFileError):
        return EXIT_CORRUPT
    if isinstance(error, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(error, (ConfigError, FileNotFoundError, ValueError)):
        return EXIT_CONFIG
    raise error


def configure_logging(level=None):
    """Set the root log level from CIMLE_LOG (default WARNING)."""
    name = level or os.environ.get(LOG_ENV_VAR, "WARNING")
    numeric = getattr(logging, str(name).upper(), None)
    if not isinstance(numeric, int):
        numeric = logging.WARNING
    logging.basicConfig(
        level=numeric,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logging.getLogger().setLevel(numeric)
    return numeric


def _frozen_copy(array, dtype=np.float64):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def require_finite(array, what="input"):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SemanticLayout:
    """Per-pixel one-hot class vectors, shape (height, width, num_classes)."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen_copy(self.data)
        if data.ndim != 3:
            raise ShapeError(f"layout must be H x W x P, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"layout dimensions must be >= 1, got {data.shape}")
        if not np.all((data == 0.0) | (data == 1.0)):
            raise ShapeError("layout entries must be 0 or 1")
        per_pixel = data.sum(axis=-1)
        if not np.all(per_pixel == 1.0):
            i, j = np.argwhere(per_pixel != 1.0)[0]
            raise ShapeError(f"pixel ({i}, {j}) does not hold exactly one class")
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def num_classes(self):
        return self.data.shape[2]

    def labels(self):
        """Argmax decode back to an H x W integer label map."""
        return np.argmax(self.data, axis=-1)


@dataclass(frozen=True)
class ImageTensor:
    """Real-valued image, shape (height, width, channels)."""

    data: np.ndarray

    def __post_init__(self):
        data = _frozen_copy(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"image must be H x W x C, got shape {data.shape}")
        require_finite(data, "image")
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class NoiseSeed:
    """Low-dimensional latent vector z~."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen_copy(self.values)
        if values.ndim != 1 or values.shape[0] < 1:
            raise ShapeError(f"noise seed must be a non-empty vector, got {values.shape}")
        require_finite(values, "noise seed")
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class NoiseField:
    """Full-size noise channels z or z', shape (height, width, channels)."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen_copy(self.values)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ShapeError(f"noise field must be H x W x C_z, got {values.shape}")
        require_finite(values, "noise field")
        object.__setattr__(self, "values", values)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

def _key_part(key):
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    key = int(key)
    if key < 0:
        raise ValueError(f"rng keys must be non-negative, got {key}")
    return key


class Rng:
    """
    Seeded, counter-based random stream (Philox).

    Children are derived by seed-splitting: `rng.child("noise", epoch, i)`
    always yields the same stream for the same seed and keys, no matter
    what else was drawn before. Parallel code takes children, never a
    shared parent.
    """

    def __init__(self, seed, _spawn_key=()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.spawn_key = tuple(_spawn_key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self):
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key})"

    def child(self, *keys):
        return Rng(self.seed, self.spawn_key + tuple(_key_part(k) for k in keys))

    def normal(self, shape):
        return self._generator.standard_normal(shape, dtype=np.float64)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._generator.uniform(low, high, size)

    def integers(self, high, size=None, low=0):
        return self._generator.integers(low, high, size=size)

    def choice(self, n, size, p=None, replace=True):
        return self._generator.choice(n, size=size, replace=replace, p=p)

    def permutation(self, n):
        return self._generator.permutation(n)


def sample_gaussian_noise(rng, shape):
    """
    Draw i.i.d. N(0, 1) entries. A 1-d shape gives a NoiseSeed, a 3-d
    shape a NoiseField.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if not shape or any(s < 1 for s in shape):
        raise ValueError(f"noise shape dimensions must be >= 1, got {shape}")
    values = rng.normal(shape)
    if len(shape) == 1:
        return NoiseSeed(values)
    if len(shape) == 3:
        return NoiseField(values)
    raise ShapeError(f"noise shape must be (d,) or (H, W, C), got {shape}")


# ---------------------------------------------------------------------------
# Encodings
# ---------------------------------------------------------------------------

def check_label_map(label_map, num_classes):
    label_map = np.asarray(label_map)
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if label_map.size == 0:
        raise ShapeError("label map is empty")
    bad = (label_map < 0) | (label_map >= num_classes)
    if np.any(bad):
        coordinate = np.argwhere(bad)[0]
        raise ClassIdError(coordinate, label_map[tuple(coordinate)], num_classes)
    return label_map.astype(np.int64)


def one_hot_batch(label_maps, num_classes):
    """(..., H, W) integer ids -> (..., H, W, P) float64 one-hot."""
    label_maps = check_label_map(label_maps, num_classes)
    return np.eye(num_classes, dtype=np.float64)[label_maps]


def one_hot_encode(label_map, num_classes):
    label_map = np.asarray(label_map)
    if label_map.ndim != 2:
        raise ShapeError(f"label map must be H x W, got shape {label_map.shape}")
    return SemanticLayout(one_hot_batch(label_map, num_classes))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class PairedDataset:
    """
    n aligned (label map, image) pairs.

    labels:   (n, H, W) uint8 class ids
    images:   (n, H, W, C) float64
    metadata: one row per (image_index, class) with the chosen mode_id
    modes:    ground-truth modes, columns class, mode_id, v0..v{C-1}
    """

    task: str
    labels: np.ndarray
    images: np.ndarray
    num_classes: int
    metadata: pd.DataFrame = field(default_factory=pd.DataFrame)
    modes: pd.DataFrame = field(default_factory=pd.DataFrame)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.labels.ndim != 3 or self.images.ndim != 4:
            raise ShapeError("labels must be (n, H, W) and images (n, H, W, C)")
        if self.labels.shape != self.images.shape[:3]:
            raise ShapeError(
                f"labels {self.labels.shape} and images {self.images.shape} disagree"
            )
        check_label_map(self.labels, self.num_classes)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def height(self):
        return self.labels.shape[1]

    @property
    def width(self):
        return self.labels.shape[2]

    @property
    def channels(self):
        return self.images.shape[3]

    def layout(self, k):
        return one_hot_encode(self.labels[k], self.num_classes)

    def onehot(self, indices):
        return one_hot_batch(self.labels[np.asarray(indices)], self.num_classes)

    def distinct_layout_indices(self):
        """First image index of every distinct label map, in dataset order."""
        seen = {}
        for k in range(len(self)):
            key = self.labels[k].tobytes()
            if key not in seen:
                seen[key] = k
        return list(seen.values())

    def mode_table(self, class_id):
        """(k, C) array of ground-truth modes for one class/condition."""
        rows = self.modes[self.modes["class"] == class_id].sort_values("mode_id")
        value_columns = [c for c in self.modes.columns if c.startswith("v")]
        return rows[value_columns].to_numpy(dtype=np.float64)


# ---------------------------------------------------------------------------
# CIML1 container
# ---------------------------------------------------------------------------

def encode_container(array, kind):
    array = np.asarray(array)
    if kind == KIND_LABELS:
        if array.size and (array.min() < 0 or array.max() > 255):
            raise ValueError("label ids must fit in 8 bits")
        payload = np.ascontiguousarray(array, dtype=np.uint8).tobytes()
    elif kind == KIND_TENSOR:
        payload = np.ascontiguousarray(array, dtype="<f8").tobytes()
    else:
        raise ValueError(f"unknown container kind {kind!r}")
    header = CONTAINER_MAGIC + kind + struct.pack("<i", array.ndim)
    header += struct.pack(f"<{array.ndim}i", *array.shape)
    return header + payload


def decode_container(blob):
    if len(blob) < 10 or blob[:5] != CONTAINER_MAGIC:
        raise CorruptFileError("not a CIML1 container (bad magic)")
    kind = blob[5:6]
    (ndim,) = struct.unpack_from("<i", blob, 6)
    if ndim < 0 or len(blob) < 10 + 4 * ndim:
        raise CorruptFileError("truncated CIML1 header")
    shape = struct.unpack_from(f"<{ndim}i", blob, 10)
    offset = 10 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if kind == KIND_LABELS:
        dtype, itemsize = np.uint8, 1
    elif kind == KIND_TENSOR:
        dtype, itemsize = np.dtype("<f8"), 8
    else:
        raise CorruptFileError(f"unknown container kind {kind!r}")
    if len(blob) - offset != count * itemsize:
        raise CorruptFileError(
            f"payload holds {len(blob) - offset} bytes, expected {count * itemsize}"
        )
    array = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    array = array.reshape(shape)
    if kind == KIND_TENSOR:
        return array.astype(np.float64)
    return array.copy()


def write_labels(path, label_maps):
    Path(path).write_bytes(encode_container(label_maps, KIND_LABELS))


def write_tensor(path, array):
    Path(path).write_bytes(encode_container(array, KIND_TENSOR))


def read_container(path):
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Image export
# ---------------------------------------------------------------------------

def to_uint8(image):
    """Clamp to [0, 1] and quantize to 8 bits; 1- or 2-channel data is padded to RGB."""
    data = image.data if isinstance(image, ImageTensor) else np.asarray(image)
    data = np.clip(data, 0.0, 1.0)
    if data.shape[-1] == 1:
        data = np.repeat(data, 3, axis=-1)
    elif data.shape[-1] == 2:
        data = np.concatenate([data, np.zeros(data.shape[:-1] + (1,))], axis=-1)
    return np.round(data[..., :3] * 255.0).astype(np.uint8)


def write_ppm(path, image):
    pixels = to_uint8(image)
    height, width = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path):
    blob = Path(path).read_bytes()
    match = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if match is None:
        raise CorruptFileError(f"{path} is not a binary PPM")
    width, height, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise CorruptFileError("only 8-bit PPM is supported")
    payload = blob[match.end():]
    if len(payload) != width * height * 3:
        raise CorruptFileError(f"{path} pixel payload is truncated")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
