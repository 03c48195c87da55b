#!/usr/bin/env python3
"""
The implicit model T_theta(x, z) and its noise encoder.

Architecture (all layers are zero-padded 3x3 local linear maps, leaky
rectifier slope 0.2, final layers affine):

  noise encoder   concat(x, broadcast z~) -> e1 -> e2 -> C_z   = z'
  main network    inp = concat(x, z')
                  [refine_scales=2] coarse = lrelu(conv(pool(inp)))
                                    h = concat(inp, upsample(coarse))
                  h -> hidden_1 -> ... -> hidden_n -> output channels

Without the noise encoder a full-size field z is fed in place of z'.

Gradients are written out by hand for this fixed family (no autodiff
tape). Public single-sample functions wrap batched `*_batch` versions
that training and evaluation use.

Checkpoint layout (little-endian):
  b"CIMLckpt" | uint32 header length | header text (key=value lines) |
  uint64 len(theta) | theta float64 | uint64 len(theta_e) | theta_e float64 |
  uint32 CRC-32 of all preceding bytes
"""

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cimle_core import (
    CorruptFileError,
    DivergenceError,
    ImageTensor,
    NoiseField,
    NoiseSeed,
    NonFiniteError,
    Rng,
    SemanticLayout,
    ShapeError,
)
from conv_ops import (
    LEAK,
    avg_pool2,
    avg_pool2_backward,
    conv3x3,
    conv3x3_backward,
    conv_param_count,
    leaky_relu,
    leaky_relu_backward,
    upsample2,
    upsample2_backward,
)


CHECKPOINT_MAGIC = b"CIMLckpt"
NOISE_LAYOUTS = ("per_pixel", "broadcast")

logger = logging.getLogger(__name__)


def _widths(value):
    return tuple(int(v) for v in value)


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture hyperparameters; fully determines the parameter count."""

    input_classes: int
    output_channels: int = 3
    height: int = 16
    width: int = 32
    noise_channels: int = 10
    seed_dim: int = 8
    hidden_widths: tuple = (16, 16)
    encoder_widths: tuple = (16, 16)
    refine_scales: int = 2
    use_noise_encoder: bool = True
    noise_layout: str = "per_pixel"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", _widths(self.hidden_widths))
        object.__setattr__(self, "encoder_widths", _widths(self.encoder_widths))
        counts = {
            "input_classes": self.input_classes,
            "output_channels": self.output_channels,
            "height": self.height,
            "width": self.width,
            "noise_channels": self.noise_channels,
            "seed_dim": self.seed_dim,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError(f"hidden widths must be non-empty and >= 1, got {self.hidden_widths}")
        if len(self.encoder_widths) != 2 or min(self.encoder_widths) < 1:
            raise ValueError(
                f"the 3-layer noise encoder needs two widths >= 1, got {self.encoder_widths}"
            )
        if self.refine_scales not in (1, 2):
            raise ValueError(f"refine_scales must be 1 or 2, got {self.refine_scales}")
        if self.refine_scales == 2 and (self.height % 2 or self.width % 2):
            raise ValueError("refine_scales=2 needs even height and width")
        if self.noise_layout not in NOISE_LAYOUTS:
            raise ValueError(f"noise_layout must be one of {NOISE_LAYOUTS}")

    # -- layer tables -----------------------------------------------------

    def encoder_layers(self):
        if not self.use_noise_encoder:
            return []
        e1, e2 = self.encoder_widths
        return [
            (self.input_classes + self.seed_dim, e1),
            (e1, e2),
            (e2, self.noise_channels),
        ]

    def main_layers(self):
        in_channels = self.input_classes + self.noise_channels
        layers = []
        fine_in = in_channels
        if self.refine_scales == 2:
            layers.append((in_channels, self.hidden_widths[0]))
            fine_in = in_channels + self.hidden_widths[0]
        previous = fine_in
        for width in self.hidden_widths:
            layers.append((previous, width))
            previous = width
        layers.append((previous, self.output_channels))
        return layers

    def param_count(self):
        return sum(conv_param_count(c_in, c_out) for c_in, c_out in self.main_layers())

    def encoder_param_count(self):
        return sum(conv_param_count(c_in, c_out) for c_in, c_out in self.encoder_layers())

    def image_shape(self):
        return (self.height, self.width, self.output_channels)

    def field_shape(self):
        return (self.height, self.width, self.noise_channels)

    def latent_shape(self):
        """Shape of the noise a caller draws: z~ with the encoder, z without."""
        if self.use_noise_encoder:
            return (self.seed_dim,)
        return self.field_shape()

    # -- header serialization ----------------------------------------------

    def to_header(self):
        return {
            "input_classes": str(self.input_classes),
            "output_channels": str(self.output_channels),
            "height": str(self.height),
            "width": str(self.width),
            "noise_channels": str(self.noise_channels),
            "seed_dim": str(self.seed_dim),
            "hidden_widths": ",".join(str(w) for w in self.hidden_widths),
            "encoder_widths": ",".join(str(w) for w in self.encoder_widths),
            "refine_scales": str(self.refine_scales),
            "use_noise_encoder": "true" if self.use_noise_encoder else "false",
            "noise_layout": self.noise_layout,
        }

    @classmethod
    def from_header(cls, header):
        def ints(text):
            return tuple(int(t) for t in text.split(","))

        return cls(
            input_classes=int(header["input_classes"]),
            output_channels=int(header["output_channels"]),
            height=int(header["height"]),
            width=int(header["width"]),
            noise_channels=int(header["noise_channels"]),
            seed_dim=int(header["seed_dim"]),
            hidden_widths=ints(header["hidden_widths"]),
            encoder_widths=ints(header["encoder_widths"]),
            refine_scales=int(header["refine_scales"]),
            use_noise_encoder=header["use_noise_encoder"] == "true",
            noise_layout=header["noise_layout"],
        )


@dataclass(frozen=True)
class GeneratorState:
    """Parameters theta (main net) and theta_e (noise encoder) for one spec."""

    theta: np.ndarray
    theta_e: np.ndarray
    spec: GeneratorSpec

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64, copy=True)
        theta_e = np.array(self.theta_e, dtype=np.float64, copy=True)
        if theta.shape != (self.spec.param_count(),):
            raise ShapeError(
                f"theta has {theta.size} entries, spec needs {self.spec.param_count()}"
            )
        if theta_e.shape != (self.spec.encoder_param_count(),):
            raise ShapeError(
                f"theta_e has {theta_e.size} entries, spec needs {self.spec.encoder_param_count()}"
            )
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(theta_e))):
            raise NonFiniteError("generator parameters contain non-finite values")
        theta.setflags(write=False)
        theta_e.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "theta_e", theta_e)

    @property
    def num_params(self):
        return self.theta.size + self.theta_e.size

    def flat(self):
        return np.concatenate([self.theta, self.theta_e])


@dataclass(frozen=True)
class Gradient:
    """Reverse-mode gradient w.r.t. theta, theta_e and the noise input."""

    theta: np.ndarray
    theta_e: np.ndarray
    noise: np.ndarray = field(default=None)

    def flat(self):
        parts = [self.theta, self.theta_e]
        if self.noise is not None:
            parts.append(np.ravel(self.noise))
        return np.concatenate(parts)


def _unpack(vector, layers):
    params = []
    offset = 0
    for c_in, c_out in layers:
        size = 9 * c_in * c_out
        w = vector[offset:offset + size].reshape(c_in, 3, 3, c_out)
        offset += size
        b = vector[offset:offset + c_out]
        offset += c_out
        params.append((w, b))
    return params


def _pack(grads):
    if not grads:
        return np.zeros(0)
    return np.concatenate([np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads])


def init_params(spec, rng):
    """Fan-in-scaled normal weights (leaky-rectifier gain), zero biases."""

    def draw(layers, stream):
        pieces = []
        for index, (c_in, c_out) in enumerate(layers):
            std = np.sqrt(2.0 / ((1.0 + LEAK ** 2) * 9 * c_in))
            pieces.append(stream.child(index).normal(9 * c_in * c_out) * std)
            pieces.append(np.zeros(c_out))
        return np.concatenate(pieces) if pieces else np.zeros(0)

    theta = draw(spec.main_layers(), rng.child("main"))
    theta_e = draw(spec.encoder_layers(), rng.child("encoder"))
    return GeneratorState(theta, theta_e, spec)


# ---------------------------------------------------------------------------
# Batched forward / backward
# ---------------------------------------------------------------------------

@dataclass
class _StackTrace:
    inputs: list
    preacts: list


def _stack_forward(params, x, final_affine=True):
    inputs, preacts = [], []
    h = x
    for index, (w, b) in enumerate(params):
        inputs.append(h)
        a = conv3x3(h, w, b)
        preacts.append(a)
        is_last = index == len(params) - 1
        h = a if (is_last and final_affine) else leaky_relu(a)
    return h, _StackTrace(inputs, preacts)


def _stack_backward(params, trace, g, final_affine=True):
    grads = [None] * len(params)
    for index in reversed(range(len(params))):
        is_last = index == len(params) - 1
        if not (is_last and final_affine):
            g = leaky_relu_backward(trace.preacts[index], g)
        g, dw, db = conv3x3_backward(trace.inputs[index], params[index][0], g)
        grads[index] = (dw, db)
    return g, grads


@dataclass
class ForwardTrace:
    """Everything backward needs, plus the pre-activations for kink checks."""

    field: np.ndarray
    encoder: object
    main_input: np.ndarray
    coarse: object
    fine: object

    def preactivations(self):
        traces = [t for t in (self.encoder, self.coarse, self.fine) if t is not None]
        return [a for t in traces for a in t.preacts]


def _check_batch(spec, onehot, noise):
    onehot = np.asarray(onehot, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    expected = (spec.height, spec.width, spec.input_classes)
    if onehot.ndim != 4 or onehot.shape[1:] != expected:
        raise ShapeError(f"layouts must be (B,) + {expected}, got {onehot.shape}")
    latent = spec.latent_shape()
    if noise.shape != (onehot.shape[0],) + latent:
        raise ShapeError(
            f"noise must be ({onehot.shape[0]},) + {latent}, got {noise.shape}"
        )
    return onehot, noise


def _encode(spec, state, onehot, seeds):
    batch = onehot.shape[0]
    tiled = np.broadcast_to(
        seeds[:, None, None, :], (batch, spec.height, spec.width, spec.seed_dim)
    )
    params = _unpack(state.theta_e, spec.encoder_layers())
    return _stack_forward(params, np.concatenate([onehot, tiled], axis=-1))


def _trace_batch(state, onehot, noise):
    spec = state.spec
    onehot, noise = _check_batch(spec, onehot, noise)
    encoder_trace = None
    if spec.use_noise_encoder:
        field_values, encoder_trace = _encode(spec, state, onehot, noise)
    else:
        field_values = noise
    params = _unpack(state.theta, spec.main_layers())
    main_input = np.concatenate([onehot, field_values], axis=-1)
    coarse_trace = None
    if spec.refine_scales == 2:
        coarse, coarse_trace = _stack_forward(params[:1], avg_pool2(main_input), final_affine=False)
        h = np.concatenate([main_input, upsample2(coarse)], axis=-1)
        fine_params = params[1:]
    else:
        h = main_input
        fine_params = params
    out, fine_trace = _stack_forward(fine_params, h)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("generator produced non-finite values", state=state)
    return out, ForwardTrace(field_values, encoder_trace, main_input, coarse_trace, fine_trace)


def encode_batch(state, onehot, seeds):
    """Noise encoder over a batch: (B, H, W, P), (B, d) -> (B, H, W, C_z)."""
    spec = state.spec
    if not spec.use_noise_encoder:
        raise ShapeError("this generator was built without a noise encoder")
    onehot, seeds = _check_batch(spec, onehot, seeds)
    field_values, _ = _encode(spec, state, onehot, seeds)
    return field_values


def encode_backward_batch(state, onehot, seeds, upstream):
    """Gradient of sum_b <upstream_b, E(x_b, z~_b)> w.r.t. theta_e and z~."""
    spec = state.spec
    if not spec.use_noise_encoder:
        raise ShapeError("this generator was built without a noise encoder")
    onehot, seeds = _check_batch(spec, onehot, seeds)
    _, trace = _encode(spec, state, onehot, seeds)
    params = _unpack(state.theta_e, spec.encoder_layers())
    g_input, grads = _stack_backward(params, trace, np.asarray(upstream, dtype=np.float64))
    g_seed = g_input[..., spec.input_classes:].sum(axis=(1, 2))
    return Gradient(np.zeros_like(state.theta), _pack(grads), g_seed)


def forward_fields_batch(state, onehot, fields):
    """Main network only, fed a precomputed noise field z or z'."""
    spec = state.spec
    onehot = np.asarray(onehot, dtype=np.float64)
    fields = np.asarray(fields, dtype=np.float64)
    if fields.shape != onehot.shape[:1] + spec.field_shape():
        raise ShapeError(f"noise field must be (B,) + {spec.field_shape()}, got {fields.shape}")
    raw = spec if not spec.use_noise_encoder else _without_encoder(spec)
    proxy = GeneratorState(state.theta, np.zeros(0), raw)
    out, _ = _trace_batch(proxy, onehot, fields)
    return out


def _without_encoder(spec):
    header = spec.to_header()
    header["use_noise_encoder"] = "false"
    return GeneratorSpec.from_header(header)


def generate_batch(state, onehot, noise):
    """T_theta over a batch; `noise` is z~ (B, d) or z (B, H, W, C_z) per spec."""
    out, _ = _trace_batch(state, onehot, noise)
    return out


def activation_pattern(state, onehot, noise):
    """Signs of every pre-activation; equal patterns mean no kink lies between two inputs."""
    _, trace = _trace_batch(state, onehot, noise)
    return np.concatenate([(a > 0).ravel() for a in trace.preactivations()])


def backward_batch(state, onehot, noise, upstream):
    """
    Exact gradient of sum_b <upstream_b, T_theta(x_b, noise_b)>.
    Parameter gradients are summed over the batch; the noise gradient
    keeps the batch axis.
    """
    spec = state.spec
    out, trace = _trace_batch(state, onehot, noise)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != out.shape:
        raise ShapeError(f"upstream gradient {upstream.shape} does not match output {out.shape}")

    params = _unpack(state.theta, spec.main_layers())
    if spec.refine_scales == 2:
        g_h, fine_grads = _stack_backward(params[1:], trace.fine, upstream)
        n_in = trace.main_input.shape[-1]
        g_input = g_h[..., :n_in]
        g_coarse = upsample2_backward(g_h[..., n_in:])
        g_pooled, coarse_grads = _stack_backward(
            params[:1], trace.coarse, g_coarse, final_affine=False
        )
        g_input = g_input + avg_pool2_backward(g_pooled, trace.main_input.shape)
        main_grads = coarse_grads + fine_grads
    else:
        g_input, main_grads = _stack_backward(params, trace.fine, upstream)

    g_field = g_input[..., spec.input_classes:]
    if spec.use_noise_encoder:
        enc_params = _unpack(state.theta_e, spec.encoder_layers())
        g_enc_input, enc_grads = _stack_backward(enc_params, trace.encoder, g_field)
        g_noise = g_enc_input[..., spec.input_classes:].sum(axis=(1, 2))
        theta_e_grad = _pack(enc_grads)
    else:
        g_noise = g_field
        theta_e_grad = np.zeros(0)
    return Gradient(_pack(main_grads), theta_e_grad, g_noise)


# ---------------------------------------------------------------------------
# Single-sample API
# ---------------------------------------------------------------------------

def _layout_batch(spec, x):
    data = x.data if isinstance(x, SemanticLayout) else np.asarray(x, dtype=np.float64)
    expected = (spec.height, spec.width, spec.input_classes)
    if data.shape != expected:
        raise ShapeError(f"layout shape {data.shape} does not match spec {expected}")
    return data[None]


def _noise_values(noise):
    if isinstance(noise, (NoiseSeed, NoiseField)):
        return noise.values
    return np.asarray(noise, dtype=np.float64)


def noise_encode(state, x, z_seed):
    """z' = E(x, z~), shape (H, W, C_z)."""
    seed = _noise_values(z_seed)
    if seed.shape != (state.spec.seed_dim,):
        raise ShapeError(f"noise seed must have dim {state.spec.seed_dim}, got {seed.shape}")
    return NoiseField(encode_batch(state, _layout_batch(state.spec, x), seed[None])[0])


def forward(state, x, z):
    """T_theta(x, z) for a full-size noise field z (or encoded z')."""
    values = _noise_values(z)
    if values.shape != state.spec.field_shape():
        raise ShapeError(f"noise field must be {state.spec.field_shape()}, got {values.shape}")
    return ImageTensor(forward_fields_batch(state, _layout_batch(state.spec, x), values[None])[0])


def generate(state, x, noise):
    """Sample procedure: encode z~ when the spec has an encoder, then run T_theta."""
    values = _noise_values(noise)
    return ImageTensor(generate_batch(state, _layout_batch(state.spec, x), values[None])[0])


def backward(state, x, noise, upstream_grad):
    upstream = upstream_grad.data if isinstance(upstream_grad, ImageTensor) else upstream_grad
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != state.spec.image_shape():
        raise ShapeError(
            f"upstream gradient {upstream.shape} does not match output {state.spec.image_shape()}"
        )
    values = _noise_values(noise)
    grad = backward_batch(state, _layout_batch(state.spec, x), values[None], upstream[None])
    return Gradient(grad.theta, grad.theta_e, grad.noise[0])


def apply_update(state, gradient, learning_rate):
    """Plain gradient-descent step theta <- theta - eta * grad (no momentum)."""
    if isinstance(gradient, Gradient):
        g_theta, g_theta_e = np.asarray(gradient.theta), np.asarray(gradient.theta_e)
    else:
        flat = np.asarray(gradient, dtype=np.float64)
        if flat.shape != (state.num_params,):
            raise ShapeError(f"gradient has {flat.size} entries, state has {state.num_params}")
        g_theta, g_theta_e = flat[:state.theta.size], flat[state.theta.size:]
    if g_theta.shape != state.theta.shape or g_theta_e.shape != state.theta_e.shape:
        raise ShapeError("gradient length does not match the parameter vectors")
    if not (np.all(np.isfinite(g_theta)) and np.all(np.isfinite(g_theta_e))):
        raise NonFiniteError("gradient contains non-finite entries")
    if learning_rate == 0:
        return state
    return GeneratorState(
        state.theta - learning_rate * g_theta,
        state.theta_e - learning_rate * g_theta_e,
        state.spec,
    )


# ---------------------------------------------------------------------------
# Noise sampling
# ---------------------------------------------------------------------------

def sample_noise_batch(spec, rng, count):
    """`count` latent draws for this spec: z~ vectors, or z fields."""
    if spec.use_noise_encoder:
        return rng.normal((count, spec.seed_dim))
    if spec.noise_layout == "broadcast":
        per_channel = rng.normal((count, 1, 1, spec.noise_channels))
        return np.broadcast_to(per_channel, (count,) + spec.field_shape()).copy()
    return rng.normal((count,) + spec.field_shape())


def sample_noise(spec, rng):
    values = sample_noise_batch(spec, rng, 1)[0]
    if spec.use_noise_encoder:
        return NoiseSeed(values)
    return NoiseField(values)


def noise_for_seed(spec, seed, index=0):
    """The index-th latent draw for an integer seed, shared by sampling and interpolation."""
    return sample_noise(spec, Rng(seed).child(index))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def encode_checkpoint(state, metadata=None):
    header = dict(state.spec.to_header())
    for key, value in (metadata or {}).items():
        header[f"meta.{key}"] = str(value)
    header_text = "".join(f"{k}={header[k]}\n" for k in sorted(header)).encode("utf-8")
    blob = CHECKPOINT_MAGIC + struct.pack("<I", len(header_text)) + header_text
    blob += struct.pack("<Q", state.theta.size) + state.theta.astype("<f8").tobytes()
    blob += struct.pack("<Q", state.theta_e.size) + state.theta_e.astype("<f8").tobytes()
    return blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)


def decode_checkpoint(blob):
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CorruptFileError("not a generator checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptFileError("checkpoint CRC mismatch")
    try:
        offset = len(CHECKPOINT_MAGIC)
        (header_len,) = struct.unpack_from("<I", body, offset)
        offset += 4
        header_text = body[offset:offset + header_len].decode("utf-8")
        offset += header_len
        vectors = []
        for _ in range(2):
            (count,) = struct.unpack_from("<Q", body, offset)
            offset += 8
            vectors.append(np.frombuffer(body, dtype="<f8", count=count, offset=offset).astype(np.float64))
            offset += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise CorruptFileError(f"truncated checkpoint: {e}") from e
    if offset != len(body):
        raise CorruptFileError("checkpoint has trailing bytes before the CRC")
    header = dict(line.split("=", 1) for line in header_text.splitlines() if line)
    metadata = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
    try:
        spec = GeneratorSpec.from_header(header)
        state = GeneratorState(vectors[0], vectors[1], spec)
    except (KeyError, ValueError) as e:
        raise CorruptFileError(f"checkpoint header is inconsistent: {e}") from e
    return state, metadata


def save_checkpoint(path, state, metadata=None):
    Path(path).write_bytes(encode_checkpoint(state, metadata))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
