"""Bilinear sampling, field resizing, and pooling shared across stages.

Positions are (u, v) with integer values at pixel centers; fields are indexed
[row=v, col=u].
"""

from __future__ import annotations

import numpy as np


def identity_grid(h, w):
    """(h, w, 2) grid of pixel-center coordinates (u, v)."""
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.stack([us, vs], axis=-1)


def gather_bilinear(grid, positions):
    """Bilinear sample of grid (H, W[, C]) at positions (..., 2).

    Samples needing a corner with nonzero weight outside the grid are marked
    invalid and zero-filled (points exactly on the boundary remain valid, so
    integer coordinates always equal direct indexing). Returns (values, valid).
    """
    grid = np.asarray(grid)
    scalar_field = grid.ndim == 2
    if scalar_field:
        grid = grid[..., None]
    h, w = grid.shape[:2]
    pos = np.asarray(positions, dtype=np.float64)
    u, v = pos[..., 0], pos[..., 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    fu, fv = u - u0, v - v0
    w00 = (1 - fu) * (1 - fv)
    w01 = fu * (1 - fv)
    w10 = (1 - fu) * fv
    w11 = fu * fv
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    vals = (grid[v0, u0] * w00[..., None] + grid[v0, u1] * w01[..., None] +
            grid[v1, u0] * w10[..., None] + grid[v1, u1] * w11[..., None])
    vals = np.where(valid[..., None], vals, 0.0)
    if scalar_field:
        vals = vals[..., 0]
    return vals, valid


def masked_gather_bilinear(grid, mask, positions, min_weight=1e-9):
    """Mask-aware bilinear sample: off-mask corners are dropped and the
    remaining weights renormalized; samples with no masked corner are invalid.
    """
    grid = np.asarray(grid, dtype=np.float64)
    scalar_field = grid.ndim == 2
    if scalar_field:
        grid = grid[..., None]
    h, w = grid.shape[:2]
    pos = np.asarray(positions, dtype=np.float64)
    u, v = pos[..., 0], pos[..., 1]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu, fv = u - u0, v - v0
    vals = np.zeros(pos.shape[:-1] + grid.shape[2:])
    weight_sum = np.zeros(pos.shape[:-1])
    for dv in (0, 1):
        for du in (0, 1):
            uu, vv = u0 + du, v0 + dv
            inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            uc, vc = np.clip(uu, 0, w - 1), np.clip(vv, 0, h - 1)
            ok = inside & mask[vc, uc]
            wgt = (fu if du else 1 - fu) * (fv if dv else 1 - fv) * ok
            vals += np.nan_to_num(grid[vc, uc]) * np.where(ok, wgt, 0.0)[..., None]
            weight_sum += np.where(ok, wgt, 0.0)
    valid = weight_sum > min_weight
    vals = np.where(valid[..., None], vals / np.maximum(weight_sum, min_weight)[..., None], 0.0)
    if scalar_field:
        vals = vals[..., 0]
    return vals, valid


def resize_field(field, out_hw, extrapolate=True):
    """Center-aligned bilinear resize of field (H, W[, C...]).

    With extrapolate=True the border cells are linearly extrapolated instead
    of edge-clamped, so affine fields survive a round trip exactly.
    """
    field = np.asarray(field, dtype=np.float64)
    h, w = field.shape[:2]
    oh, ow = out_hw
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    if not extrapolate:
        ys = np.clip(ys, 0, h - 1)
        xs = np.clip(xs, 0, w - 1)
    trailing = (1,) * (field.ndim - 2)

    if h == 1:
        rows = np.repeat(field, oh, axis=0)
    else:
        y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 2)
        fy = (ys - y0).reshape(oh, 1, *trailing)
        rows = field[y0] * (1 - fy) + field[y0 + 1] * fy
    if w == 1:
        return np.repeat(rows, ow, axis=1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 2)
    fx = (xs - x0).reshape(1, ow, *trailing)
    return rows[:, x0] * (1 - fx) + rows[:, x0 + 1] * fx


def avg_pool2_last2(arr):
    """Average-pool the final two axes by 2 (edge-replicated when odd)."""
    arr = np.asarray(arr)
    h, w = arr.shape[-2:]
    if h % 2:
        arr = np.concatenate([arr, arr[..., -1:, :]], axis=-2)
        h += 1
    if w % 2:
        arr = np.concatenate([arr, arr[..., :, -1:]], axis=-1)
        w += 1
    # paired adds beat a reshape-mean reduction on large volumes
    rows = arr[..., 0::2, :] + arr[..., 1::2, :]
    cols = rows[..., :, 0::2] + rows[..., :, 1::2]
    return cols * 0.25
