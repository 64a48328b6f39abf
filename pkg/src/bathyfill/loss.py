"""Exact Euclidean distance transform and the boundary-sensitive weighted RMSE.

Pixels near data gaps get higher loss weights so the network concentrates
on the regions it will later have to fill. Weights derive from the exact
EDT of the validity mask, clipped to a distance band, passed through a
linear or exponential decay, and affinely mapped into a configured range.
The distance field and weights are constants of the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

INF = np.inf


class EmptyMaskError(ValueError):
    """Loss undefined: no valid pixels in the mask."""


@dataclass
class BswConfig:
    d_min: float = 1.0
    d_max: float = 2.0
    decay: str = "linear"  # or "exponential"
    w_floor: float = 1.0
    w_ceil: float = 2.0

    def __post_init__(self):
        if not (0 <= self.d_min < self.d_max):
            raise ValueError(f"need 0 <= d_min < d_max, got d_min={self.d_min}, d_max={self.d_max}")
        if self.w_floor > self.w_ceil:
            raise ValueError(f"need w_floor <= w_ceil, got {self.w_floor} > {self.w_ceil}")
        if self.decay not in ("linear", "exponential"):
            raise ValueError(f"decay must be 'linear' or 'exponential', got {self.decay!r}")


def _edt_1d_sq(f):
    """Squared distance transform of a sampled function (lower envelope of parabolas).

    ``f`` must be finite; callers encode "no site" as a large finite value
    so the envelope arithmetic stays exact for integer inputs.
    """
    n = f.size
    d = np.empty(n)
    v = np.empty(n, dtype=int)  # parabola sites
    z = np.empty(n + 1)  # envelope boundaries
    k = 0
    v[0] = 0
    z[0] = -INF
    z[1] = INF
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def edt(mask) -> np.ndarray:
    """Exact Euclidean distance of every pixel to the nearest zero pixel.

    Two-pass separable transform: squared column distances first, then the
    1-D lower-envelope transform along rows. A mask with no zeros returns
    +inf everywhere (callers clip to d_max).
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    zeros = mask == 0
    if zeros.all():
        return np.zeros((h, w))
    if not zeros.any():
        return np.full((h, w), INF)

    # pass 1: per-column distance to the nearest zero, scanning down then up.
    # Columns without zeros get a finite "far" value exceeding any true
    # squared distance, keeping the envelope arithmetic finite and exact.
    big = 4.0 * (h * h + w * w) + 10.0
    col = np.full((h, w), INF)
    run = np.full(w, INF)
    for i in range(h):
        run = np.where(zeros[i], 0.0, run + 1.0)
        col[i] = run
    run = np.full(w, INF)
    for i in range(h - 1, -1, -1):
        run = np.where(zeros[i], 0.0, run + 1.0)
        col[i] = np.minimum(col[i], run)
    col_sq = np.where(np.isinf(col), big, col * col)

    # pass 2: lower envelope along each row over the squared column distances
    out = np.empty((h, w))
    for i in range(h):
        out[i] = _edt_1d_sq(col_sq[i])
    return np.sqrt(out)


def compute_weights(distances, cfg: BswConfig, mask=None) -> np.ndarray:
    """Decay the clipped distances and map the result into [w_floor, w_ceil].

    Linear decay spans [0, 1] and exponential decay spans [1/e, 1] over the
    clip band; both are remapped so the closest-to-gap pixels get w_ceil
    and the farthest get w_floor. Weights are zeroed where the mask is 0.
    """
    d = np.clip(np.asarray(distances, dtype=np.float64), cfg.d_min, cfg.d_max)
    span = cfg.d_max - cfg.d_min
    if cfg.decay == "linear":
        decay = 1.0 - (d - cfg.d_min) / span
        d_lo, d_hi = 0.0, 1.0
    else:
        decay = np.exp(-(d - cfg.d_min) / span)
        d_lo, d_hi = float(np.exp(-1.0)), 1.0
    weights = cfg.w_floor + (cfg.w_ceil - cfg.w_floor) * (decay - d_lo) / (d_hi - d_lo)
    if mask is not None:
        weights = weights * (np.asarray(mask) != 0)
    return weights


def _as_constant_target(target, mask):
    """Target with nodata cells neutralized so their stored values never matter."""
    target = np.asarray(target, dtype=np.float64)
    return np.where(mask != 0, target, 0.0)


def bsw_rmse(pred, target, mask, cfg: BswConfig | None = None):
    """Boundary-sensitive weighted RMSE: sqrt(sum(w * err^2) / sum(mask)).

    Note the denominator is the valid-pixel count, not the weight sum.
    ``pred`` is a Tensor; gradient flows to it only.
    """
    cfg = cfg or BswConfig()
    mask = np.asarray(mask)
    if not isinstance(pred, T.Tensor):
        pred = T.Tensor(pred)
    if pred.shape != mask.shape:
        raise T.ShapeError(f"pred shape {pred.shape} != mask shape {mask.shape}")
    m_count = float(mask.astype(np.float64).sum())
    if m_count == 0:
        raise EmptyMaskError("mask has no valid pixels; loss undefined")
    weights = compute_weights(edt(mask), cfg, mask=mask).astype(pred.dtype)
    target_c = _as_constant_target(target, mask).astype(pred.dtype)
    diff = pred - T.Tensor(target_c)
    weighted = diff * diff * T.Tensor(weights)
    return (weighted.sum() * (1.0 / m_count)).sqrt()


def masked_rmse(pred, target, mask):
    """Plain RMSE over valid pixels: the w == 1 special case of bsw_rmse."""
    mask = np.asarray(mask)
    if not isinstance(pred, T.Tensor):
        pred = T.Tensor(pred)
    if pred.shape != mask.shape:
        raise T.ShapeError(f"pred shape {pred.shape} != mask shape {mask.shape}")
    m_count = float(mask.astype(np.float64).sum())
    if m_count == 0:
        raise EmptyMaskError("mask has no valid pixels; loss undefined")
    target_c = _as_constant_target(target, mask).astype(pred.dtype)
    m = (mask != 0).astype(pred.dtype)
    diff = pred - T.Tensor(target_c)
    return ((diff * diff * T.Tensor(m)).sum() * (1.0 / m_count)).sqrt()
