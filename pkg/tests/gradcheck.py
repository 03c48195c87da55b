"""Central finite differences that skip stencils crossing a kink."""

import numpy as np


def numeric_partials(loss, pattern, point, coords, step=1e-6):
    """
    d loss / d point[c] for each c in coords, or NaN where the activation
    sign pattern differs between point - step and point + step.
    """
    base = pattern(point)
    out = np.full(len(coords), np.nan)
    for index, c in enumerate(coords):
        plus = point.copy()
        minus = point.copy()
        plus[c] += step
        minus[c] -= step
        if not (np.array_equal(pattern(plus), base) and np.array_equal(pattern(minus), base)):
            continue
        out[index] = (loss(plus) - loss(minus)) / (2 * step)
    return out


def max_relative_error(analytic, numeric, floor=1e-3):
    keep = ~np.isnan(numeric)
    a, n = analytic[keep], numeric[keep]
    if a.size == 0:
        return 0.0, 0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale)), int(keep.sum())
