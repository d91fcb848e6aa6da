"""Trilinear resampling through a dense displacement, with gradients for
both the sampled values and the displacement (the spatial-transform layer).
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor

_GRID_CACHE = {}


def _base_grid(shape, dtype):
    key = (shape, np.dtype(dtype).str)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        axes = [np.arange(n, dtype=dtype) for n in shape]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        _GRID_CACHE[key] = grid
    return grid


def warp3d(x, disp):
    """Sample x at p + disp(p) with trilinear interpolation.

    x: (H, W, D, C); disp: (H, W, D, 3) in voxel units. Out-of-range
    positions clamp to the border. Returns (H, W, D, C).
    """
    if x.ndim != 4 or disp.ndim != 4 or disp.shape[-1] != 3:
        raise ShapeError(f"warp3d: x {x.shape}, disp {disp.shape}")
    if x.shape[:3] != disp.shape[:3]:
        raise ShapeError(f"warp3d: grids differ, {x.shape[:3]} vs {disp.shape[:3]}")
    H, W, D, C = x.shape
    dims = np.array([H, W, D], dtype=x.dtype)

    pos = _base_grid((H, W, D), x.dtype) + disp.data
    inside = (pos > 0.0) & (pos < dims - 1.0)  # clamp kills the position gradient
    pos = np.clip(pos, 0.0, dims - 1.0)
    i0 = np.minimum(pos.astype(np.int64), np.array([H - 2, W - 2, D - 2]))
    i0 = np.maximum(i0, 0)
    f = pos - i0
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]

    base = (i0[..., 0] * W + i0[..., 1]) * D + i0[..., 2]
    xf = x.data.reshape(-1, C)
    corners = []
    weights = []
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                idx = base + (dx * W + dy) * D + dz
                corners.append(idx)
                weights.append(wx * wy * wz)

    val = np.zeros((H, W, D, C), dtype=x.dtype)
    for idx, wgt in zip(corners, weights):
        val += xf[idx] * wgt[..., None]

    out = Tensor(val, requires_grad=x.requires_grad or disp.requires_grad,
                 op="warp3d", parents=(x, disp))
    if out.requires_grad:
        def bwd(g):
            if x.requires_grad:
                gx = np.zeros(H * W * D * C, dtype=x.dtype)
                ch_off = np.arange(C, dtype=np.int64)
                for idx, wgt in zip(corners, weights):
                    flat = (idx[..., None] * C + ch_off).ravel()
                    contrib = (g * wgt[..., None]).ravel()
                    gx += np.bincount(flat, weights=contrib, minlength=gx.size).astype(x.dtype)
                x.accumulate_grad(gx.reshape(H, W, D, C))
            if disp.requires_grad:
                gpos = np.zeros((H, W, D, 3), dtype=x.dtype)
                n = 0
                for dx in (0, 1):
                    sx = 1.0 if dx else -1.0
                    wx = fx if dx else 1.0 - fx
                    for dy in (0, 1):
                        sy = 1.0 if dy else -1.0
                        wy = fy if dy else 1.0 - fy
                        for dz in (0, 1):
                            sz = 1.0 if dz else -1.0
                            wz = fz if dz else 1.0 - fz
                            dot = (xf[corners[n]] * g).sum(axis=-1)
                            gpos[..., 0] += dot * sx * wy * wz
                            gpos[..., 1] += dot * wx * sy * wz
                            gpos[..., 2] += dot * wx * wy * sz
                            n += 1
                disp.accumulate_grad(np.where(inside, gpos, 0.0))
        out._bwd = bwd
    return out
