"""
Forward/backward pairs for the fixed layer family used by the generator and
the feature extractor. All arrays are channels-last with a leading batch
axis: (B, H, W, C).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


LEAK = 0.2


def leaky_relu(a):
    return np.where(a > 0, a, LEAK * a)


def leaky_relu_backward(a, g):
    """Gradient through leaky_relu given its pre-activation `a`."""
    return np.where(a > 0, g, LEAK * g)


def _patches(x):
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # (B, H, W, C, 3, 3); patches[b, h, w, c, i, j] = padded[b, h + i, w + j, c]
    return sliding_window_view(padded, (3, 3), axis=(1, 2))


def conv3x3(x, w, b=None):
    """Zero-padded stride-1 3x3 local linear map. w: (C_in, 3, 3, C_out)."""
    out = np.einsum("bhwcij,cijo->bhwo", _patches(x), w, optimize=True)
    if b is not None:
        out = out + b
    return out


def conv3x3_backward(x, w, g, need_weights=True):
    """Return (dx, dw, db) for conv3x3 given upstream gradient g (B, H, W, C_out)."""
    height, width = x.shape[1], x.shape[2]
    dw = db = None
    if need_weights:
        dw = np.einsum("bhwcij,bhwo->cijo", _patches(x), g, optimize=True)
        db = g.sum(axis=(0, 1, 2))
    dpatches = np.einsum("bhwo,cijo->bhwcij", g, w, optimize=True)
    dpadded = np.zeros((x.shape[0], height + 2, width + 2, x.shape[3]))
    for i in range(3):
        for j in range(3):
            dpadded[:, i:i + height, j:j + width, :] += dpatches[..., i, j]
    return dpadded[:, 1:-1, 1:-1, :], dw, db


def _pool_factors(height, width):
    return (2 if height >= 2 else 1), (2 if width >= 2 else 1)


def pooled_size(height, width):
    fh, fw = _pool_factors(height, width)
    return height // fh, width // fw


def avg_pool2(x):
    """2x2 area-average pooling; a trailing odd row/column is dropped, size-1 axes kept."""
    batch, height, width, channels = x.shape
    fh, fw = _pool_factors(height, width)
    hc, wc = (height // fh) * fh, (width // fw) * fw
    blocks = x[:, :hc, :wc].reshape(batch, hc // fh, fh, wc // fw, fw, channels)
    return blocks.mean(axis=(2, 4))


def avg_pool2_backward(g, input_shape):
    batch, height, width, channels = input_shape
    fh, fw = _pool_factors(height, width)
    hc, wc = (height // fh) * fh, (width // fw) * fw
    spread = np.repeat(np.repeat(g, fh, axis=1), fw, axis=2) / (fh * fw)
    dx = np.zeros(input_shape)
    dx[:, :hc, :wc] = spread
    return dx


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(g):
    batch, height, width, channels = g.shape
    return g.reshape(batch, height // 2, 2, width // 2, 2, channels).sum(axis=(2, 4))


def conv_param_count(c_in, c_out):
    return 9 * c_in * c_out + c_out
