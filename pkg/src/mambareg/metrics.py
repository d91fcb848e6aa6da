"""Evaluation metrics: overlap, boundary distance, folding, model size."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .engine import ShapeError
from .fields import LabelVolume


@dataclass
class MetricReport:
    """Per-pair evaluation record; distances in mm, fractions in percent."""

    pair_id: str = ""
    dice_per_class: dict = field(default_factory=dict)
    dice_mean_pct: float = float("nan")
    hd95_per_class: dict = field(default_factory=dict)
    hd95_mm: float = float("nan")
    neg_jac_pct: float = float("nan")
    param_count: int = 0
    wall_time_s: float = 0.0

    FIELDS = ("pair_id", "dice_mean_pct", "hd95_mm", "neg_jac_pct", "param_count", "wall_time_s")

    def row(self):
        return {
            "pair_id": self.pair_id,
            "dice_mean_pct": self.dice_mean_pct,
            "hd95_mm": self.hd95_mm,
            "neg_jac_pct": self.neg_jac_pct,
            "param_count": self.param_count,
            "wall_time_s": self.wall_time_s,
        }


def _as_labels(x):
    return x.grid if isinstance(x, LabelVolume) else np.asarray(x)


def dice_score(a, b, num_classes=None):
    """Per-class and mean Dice in percent over non-background classes.

    Classes empty in both volumes are excluded from the mean.
    """
    ga, gb = _as_labels(a), _as_labels(b)
    if ga.shape != gb.shape:
        raise ShapeError(f"dice_score: {ga.shape} vs {gb.shape}")
    if num_classes is None:
        ka = a.num_classes if isinstance(a, LabelVolume) else int(ga.max()) + 1
        kb = b.num_classes if isinstance(b, LabelVolume) else int(gb.max()) + 1
        if isinstance(a, LabelVolume) and isinstance(b, LabelVolume) and ka != kb:
            raise ShapeError(f"dice_score: class counts differ, {ka} vs {kb}")
        num_classes = max(ka, kb)
    per_class = {}
    for c in range(1, num_classes):
        ma, mb = ga == c, gb == c
        na, nb = int(ma.sum()), int(mb.sum())
        if na == 0 and nb == 0:
            continue
        per_class[c] = 100.0 * 2.0 * int((ma & mb).sum()) / (na + nb)
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def _boundary(mask):
    """Foreground voxels with a background face-neighbor or on the volume border."""
    m = np.asarray(mask, dtype=bool)
    interior = np.zeros_like(m)
    interior[1:-1, 1:-1, 1:-1] = (
        m[1:-1, 1:-1, 1:-1]
        & m[:-2, 1:-1, 1:-1] & m[2:, 1:-1, 1:-1]
        & m[1:-1, :-2, 1:-1] & m[1:-1, 2:, 1:-1]
        & m[1:-1, 1:-1, :-2] & m[1:-1, 1:-1, 2:]
    )
    return m & ~interior


def hd95(a, b, spacing=(1.0, 1.0, 1.0)):
    """95th-percentile symmetric boundary distance in mm.

    Boundaries use 6-connectivity (volume border counts as boundary);
    distances are exact pairwise Euclidean in physical units; each directed
    distance set is reduced by the linearly interpolated 95th percentile
    and the two directions combine by max.
    """
    ma, mb = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if ma.shape != mb.shape:
        raise ShapeError(f"hd95: {ma.shape} vs {mb.shape}")
    if not ma.any() or not mb.any():
        raise ValueError("hd95: empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(_boundary(ma)) * sp
    pb = np.argwhere(_boundary(mb)) * sp
    d = cdist(pa, pb)
    d_ab = np.percentile(d.min(axis=1), 95)
    d_ba = np.percentile(d.min(axis=0), 95)
    return float(max(d_ab, d_ba))


def hd95_labels(a: LabelVolume, b: LabelVolume, spacing=None):
    """Per-class HD95 plus mean; classes empty in either volume are skipped."""
    spacing = spacing or a.spacing
    per_class = {}
    for c in range(1, a.num_classes):
        ma, mb = a.grid == c, b.grid == c
        if not ma.any() or not mb.any():
            continue
        per_class[c] = hd95(ma, mb, spacing)
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def neg_jacobian_fraction(disp):
    """Percent of interior voxels where det(grad phi) <= 0, phi = id + u.

    Central differences on the displacement; requires >= 3 voxels per axis.
    """
    u = disp.data if hasattr(disp, "data") and not isinstance(disp, np.ndarray) else np.asarray(disp)
    u = np.asarray(u)
    if u.ndim != 4 or u.shape[-1] != 3:
        raise ShapeError(f"neg_jacobian_fraction: need (H,W,D,3), got {u.shape}")
    if min(u.shape[:3]) < 3:
        raise ShapeError(f"neg_jacobian_fraction: extents must be >= 3, got {u.shape[:3]}")
    J = np.empty(tuple(s - 2 for s in u.shape[:3]) + (3, 3), dtype=np.float64)
    grads = np.gradient(u.astype(np.float64), axis=(0, 1, 2))
    for j, g in enumerate(grads):
        J[..., :, j] = g[1:-1, 1:-1, 1:-1, :]
    J[..., 0, 0] += 1.0
    J[..., 1, 1] += 1.0
    J[..., 2, 2] += 1.0
    det = np.linalg.det(J)
    return 100.0 * float((det <= 0.0).mean())


def count_params(model_or_named):
    """Total learnable scalar count."""
    named = model_or_named.named_params() if hasattr(model_or_named, "named_params") \
        else list(model_or_named)
    return int(sum(int(np.prod(p.data.shape)) if hasattr(p, "data") else int(np.prod(np.shape(p)))
                   for _, p in named))
