"""Volumetric value types and the deformation machinery built on them.

Grids are (H, W, D); vector fields carry their 3 components last,
(H, W, D, 3), in voxel units. A displacement u defines the map
phi(x) = x + u(x); resampling a volume through phi is ``warp``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import ShapeError, Tensor, as_tensor, ops, warp3d


@dataclass
class Volume:
    """Scalar intensity grid with physical spacing (mm/voxel)."""

    grid: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    ident: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 3:
            raise ShapeError(f"Volume grid must be 3-D, got {self.grid.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class LabelVolume:
    """Integer segmentation grid; background is class 0."""

    grid: np.ndarray
    num_classes: int
    spacing: tuple = (1.0, 1.0, 1.0)
    ident: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 3:
            raise ShapeError(f"LabelVolume grid must be 3-D, got {self.grid.shape}")
        if self.grid.min() < 0 or self.grid.max() >= self.num_classes:
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"[{self.grid.min()}, {self.grid.max()}]"
            )

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class VelocityField:
    """Stationary velocity, (H, W, D, 3) voxel units."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ShapeError(f"VelocityField must be (H,W,D,3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("VelocityField contains non-finite values")


@dataclass
class DisplacementField:
    """Displacement u of the map phi(x) = x + u(x), (H, W, D, 3) voxel units."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ShapeError(f"DisplacementField must be (H,W,D,3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("DisplacementField contains non-finite values")


def one_hot(labels, num_classes, dtype=np.float64):
    """(H, W, D) int grid -> (H, W, D, K) indicator channels."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def warp(x, disp):
    """Trilinear resample of channel stacks or scalar grids through phi = id + u.

    Accepts Tensors (differentiable path), arrays, or Volume. Scalar grids
    gain and lose a trailing channel axis transparently.
    """
    u = disp.data if isinstance(disp, DisplacementField) else disp
    u = as_tensor(u) if not isinstance(u, Tensor) else u
    if isinstance(x, Volume):
        arr = as_tensor(x.grid[..., None], dtype=u.dtype)
        return Volume(warp3d(arr, u).data[..., 0], x.spacing, x.ident)
    x = as_tensor(x) if not isinstance(x, Tensor) else x
    if x.ndim == 3:
        return warp3d(ops.reshape(x, x.shape + (1,)), u)[..., 0]
    return warp3d(x, u)


def warp_labels(labels: LabelVolume, disp, return_soft=False):
    """Warp a segmentation as one-hot channels, then argmax to hard labels."""
    u = disp.data if isinstance(disp, DisplacementField) else disp
    u = as_tensor(u) if not isinstance(u, Tensor) else u
    soft = warp3d(as_tensor(one_hot(labels.grid, labels.num_classes, u.dtype)), u)
    hard = LabelVolume(np.argmax(soft.data, axis=-1), labels.num_classes,
                       labels.spacing, labels.ident)
    return (hard, soft) if return_soft else hard


def integrate_svf(velocity, steps=7):
    """Scaling and squaring: u <- v / 2^T, then T self-compositions.

    Differentiable when given a Tensor; returns the same kind as the input
    (Tensor in, Tensor out; VelocityField in, DisplacementField out).
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    wrap = isinstance(velocity, VelocityField)
    v = as_tensor(velocity.data) if wrap else (
        velocity if isinstance(velocity, Tensor) else as_tensor(velocity))
    u = ops.mul(v, 1.0 / (2.0 ** steps))
    for _ in range(steps):
        u = ops.add(u, warp3d(u, u))
    return DisplacementField(u.data) if wrap else u


def identity_displacement(shape, dtype=np.float64):
    return np.zeros(tuple(shape) + (3,), dtype=dtype)
