"""Small dense-array numerics shared by the attention and box code.

Pixel convention: pixel ``(i, j)`` (row, column) sits at continuous coordinate
``(x=j, y=i)``; there is no half-pixel shift.  Samples falling outside the grid
read zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class FeatureMap:
    """A single ``[C, H, W]`` feature map tagged with its pyramid level."""

    data: np.ndarray
    level_id: int = 0

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"feature map must be [C, H, W] with C, H, W >= 1, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite entries")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class GradReport:
    max_abs_err: float
    max_rel_err: float
    n_checked: int

    def passed(self, rtol: float) -> bool:
        return self.max_rel_err < rtol


def corner_weights(x, y):
    """Bilinear corner indices and weights for continuous points.

    Returns ``x0, y0, fx, fy`` where the enclosing cell is ``[x0, x0+1] x
    [y0, y0+1]``.  On an exact gridline the cell to the left (resp. above) is
    used, so ``fx`` lies in ``(0, 1]``.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if not np.issubdtype(x.dtype, np.floating):
        x, y = x.astype(np.float64), y.astype(np.float64)
    x0 = np.ceil(x) - 1
    y0 = np.ceil(y) - 1
    # far-away or non-finite points land on an out-of-range cell instead of overflowing the cast
    with np.errstate(invalid="ignore"):
        xi = np.nan_to_num(np.clip(x0, -2, 2**40), nan=-2).astype(np.int64)
        yi = np.nan_to_num(np.clip(y0, -2, 2**40), nan=-2).astype(np.int64)
    return xi, yi, x - x0, y - y0


def _corners(x0, y0, fx, fy, height, width):
    """Yield ``(xi, yi, weight, dweight_dx, dweight_dy, valid)`` for the 4 neighbours."""
    for dy in (0, 1):
        wy = fy if dy else 1.0 - fy
        dwy = 1.0 if dy else -1.0
        for dx in (0, 1):
            wx = fx if dx else 1.0 - fx
            dwx = 1.0 if dx else -1.0
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
            yield xi, yi, wx * wy * valid, dwx * wy * valid, wx * dwy * valid, valid


def bilinear_sample(feature_map, p) -> np.ndarray:
    """Sample a ``[C, H, W]`` map at pixel-coordinate point ``p = (x, y)``.

    Returns the ``[C]`` vector of interpolated values; out-of-grid neighbours
    contribute zero.
    """
    data = feature_map.data if isinstance(feature_map, FeatureMap) else np.asarray(feature_map)
    _, height, width = data.shape
    x0, y0, fx, fy = corner_weights(p[0], p[1])
    out = np.zeros(data.shape[0], dtype=np.result_type(data.dtype, np.float64))
    for xi, yi, w, _, _, valid in _corners(x0, y0, fx, fy, height, width):
        if valid:
            out += w * data[:, yi, xi]
    return out


def bilinear_sample_grad(feature_map, p, upstream):
    """Backward of :func:`bilinear_sample`.

    Returns ``(grad_map [C, H, W], grad_p (dx, dy))`` for the scalar
    ``upstream . bilinear_sample(map, p)``.
    """
    data = feature_map.data if isinstance(feature_map, FeatureMap) else np.asarray(feature_map)
    upstream = np.asarray(upstream, dtype=np.float64)
    _, height, width = data.shape
    x0, y0, fx, fy = corner_weights(p[0], p[1])
    grad_map = np.zeros(data.shape, dtype=np.float64)
    gx = gy = 0.0
    for xi, yi, w, dwx, dwy, valid in _corners(x0, y0, fx, fy, height, width):
        if valid:
            grad_map[:, yi, xi] += w * upstream
            proj = float(upstream @ data[:, yi, xi])
            gx += dwx * proj
            gy += dwy * proj
    return grad_map, np.array([gx, gy])


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probs, grad_probs, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``probs``."""
    inner = np.sum(grad_probs * probs, axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def inverse_sigmoid(p, eps: float = DEFAULT_EPS):
    """``log(p / (1 - p))`` with ``p`` clamped to ``[eps, 1 - eps]``."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p) - np.log1p(-p)


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    step: float = 1e-5,
    *,
    max_checks: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare ``analytic_grad`` against central differences of scalar ``f`` at ``x``.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor`` is ``1e-3`` times the largest numerical gradient magnitude, so
    entries that are tiny relative to the rest of the gradient do not dominate
    the report.  ``max_checks`` restricts the comparison to a random subset of
    entries.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != x.shape:
        raise ValueError(f"gradient shape {analytic_grad.shape} != parameter shape {x.shape}")

    flat = x.reshape(-1)
    indices = np.arange(flat.size)
    if max_checks is not None and max_checks < flat.size:
        rng = rng or np.random.default_rng(0)
        indices = np.sort(rng.choice(flat.size, size=max_checks, replace=False))

    numeric = np.empty(indices.size)
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f(x)
        flat[i] = orig - step
        f_minus = f(x)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"non-finite function value while perturbing entry {i}")
        numeric[n] = (f_plus - f_minus) / (2.0 * step)

    analytic = analytic_grad.reshape(-1)[indices]
    abs_err = np.abs(analytic - numeric)
    floor = max(1e-3 * float(np.max(np.abs(numeric), initial=0.0)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return GradReport(
        max_abs_err=float(np.max(abs_err, initial=0.0)),
        max_rel_err=float(np.max(abs_err / denom, initial=0.0)),
        n_checked=int(indices.size),
    )
