"""Training objective: overlap loss on warped labels, displacement
smoothness, supervised contrastive feature loss, and conflict-aware
gradient combination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ShapeError, Tensor, as_tensor, ops
from .fields import LabelVolume, one_hot, warp3d

DICE_EPS = 1e-5


@dataclass
class LossWeights:
    lambda_c: float = 0.001
    lambda_s: float = 0.1
    tau: float = 0.07
    samples_per_volume: int = 256

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.samples_per_volume < 2:
            raise ValueError("samples_per_volume must be >= 2")


def dice_loss(warped, fixed):
    """1 - mean soft Dice over non-background channels.

    warped, fixed: (H, W, D, K) one-hot (warped may be soft). Expects
    channels to sum to ~1 per voxel.
    """
    warped = as_tensor(warped) if not isinstance(warped, Tensor) else warped
    fixed = as_tensor(fixed, like=warped) if not isinstance(fixed, Tensor) else fixed
    if warped.shape != fixed.shape:
        raise ShapeError(f"dice_loss: {warped.shape} vs {fixed.shape}")
    k = warped.shape[-1]
    if k < 2:
        raise ShapeError("dice_loss: need at least one foreground class")
    p = ops.reshape(warped, (-1, k))[:, 1:]
    q = ops.reshape(fixed, (-1, k))[:, 1:]
    inter = ops.tsum(ops.mul(p, q), axis=0)
    sizes = ops.add(ops.tsum(p, axis=0), ops.tsum(q, axis=0))
    dice = ops.div(ops.mul(inter, 2.0) + DICE_EPS, sizes + DICE_EPS)
    return 1.0 - ops.tmean(dice)


def smooth_loss(disp):
    """Diffusion regularizer on the displacement.

    Mean of squared forward differences, pooled over the three axes and
    the three vector components (a single global mean over all difference
    entries; constant fields score exactly zero).
    """
    u = as_tensor(disp) if not isinstance(disp, Tensor) else disp
    if u.ndim != 4 or u.shape[-1] != 3:
        raise ShapeError(f"smooth_loss: need (H,W,D,3), got {u.shape}")
    total = None
    count = 0
    for axis in range(3):
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        d = ops.sub(u[tuple(hi)], u[tuple(lo)])
        sq = ops.tsum(ops.mul(d, d))
        count += d.size
        total = sq if total is None else ops.add(total, sq)
    return ops.mul(total, 1.0 / count)


def supcon_loss(features, labels, tau=0.07):
    """Supervised contrastive loss over L2-normalized feature rows.

    For each anchor with at least one same-label partner:
        -(1/|P|) sum_{p in P} log( exp(z_i.z_p / tau) / sum_{a != i} exp(z_i.z_a / tau) )
    Anchors without positives are skipped; raises if none remain.
    """
    feats = as_tensor(features) if not isinstance(features, Tensor) else features
    labels = np.asarray(labels)
    if feats.ndim != 2 or labels.shape != (feats.shape[0],):
        raise ShapeError(f"supcon_loss: features {feats.shape}, labels {labels.shape}")
    m = feats.shape[0]
    if m < 2:
        raise ValueError("supcon_loss: need at least two samples")

    same = labels[:, None] == labels[None, :]
    eye = np.eye(m, dtype=bool)
    pos_mask = (same & ~eye).astype(feats.dtype)
    pos_counts = pos_mask.sum(axis=1)
    valid = pos_counts > 0
    if not valid.any():
        raise ValueError("supcon_loss: no anchor has a positive partner")

    sim = ops.mul(ops.matmul(feats, ops.transpose(feats, (1, 0))), 1.0 / tau)
    exps = ops.mul(ops.exp(sim), Tensor((~eye).astype(feats.dtype)))
    log_den = ops.log(ops.tsum(exps, axis=1, keepdims=True))
    log_prob = ops.sub(sim, log_den)

    weights = np.zeros_like(pos_mask)
    weights[valid] = pos_mask[valid] / pos_counts[valid, None]
    per_anchor = ops.tsum(ops.mul(log_prob, Tensor(weights)), axis=1)
    return ops.mul(ops.tsum(per_anchor), -1.0 / int(valid.sum()))


def sample_labeled_voxels(feature_map, labels: LabelVolume, n_samples, rng):
    """Class-stratified voxel sampling without replacement.

    Equal per-class quotas over the classes present (remainder assigned to
    the largest classes); deterministic under the generator state. Returns
    (L2-normalized feature rows, matching labels).
    """
    fm = feature_map if isinstance(feature_map, Tensor) else as_tensor(feature_map)
    if fm.ndim != 4 or fm.shape[:3] != labels.grid.shape:
        raise ShapeError(f"sample_labeled_voxels: features {fm.shape} vs labels {labels.grid.shape}")
    flat_labels = labels.grid.reshape(-1)
    if n_samples > flat_labels.size:
        raise ValueError("n_samples exceeds voxel count")
    present = np.unique(flat_labels)
    if not (present > 0).any():
        raise ValueError("segmentation has no foreground voxels")

    counts = {int(c): int((flat_labels == c).sum()) for c in present}
    quota = {int(c): n_samples // len(present) for c in present}
    remainder = n_samples - sum(quota.values())
    for c in sorted(counts, key=lambda c: -counts[c])[:remainder]:
        quota[c] += 1

    picked = []
    for c in sorted(quota):
        pool = np.flatnonzero(flat_labels == c)
        take = min(quota[c], pool.size)
        picked.append(rng.choice(pool, size=take, replace=False))
    idx = np.sort(np.concatenate(picked))

    rows = ops.take_rows(ops.reshape(fm, (-1, fm.shape[-1])), idx)
    return ops.l2normalize(rows, axis=-1), flat_labels[idx]


def gradient_surgery(g_reg, g_cl):
    """Project the contrastive gradient off a conflicting registration gradient.

    If <g_cl, g_reg> < 0, g_cl loses its component along g_reg; the
    registration gradient is never altered. Returns (combined, conflicted).
    """
    g_reg = np.asarray(g_reg)
    g_cl = np.asarray(g_cl)
    if g_reg.shape != g_cl.shape or g_reg.ndim != 1:
        raise ShapeError(f"gradient_surgery: need equal flat vectors, {g_reg.shape} vs {g_cl.shape}")
    dot = float(g_reg @ g_cl)
    if dot >= 0.0:
        return g_reg + g_cl, False
    nrm2 = float(g_reg @ g_reg)
    if nrm2 == 0.0:
        return g_reg + g_cl, False
    return g_reg + (g_cl - (dot / nrm2) * g_reg), True


def total_loss(moving_labels: LabelVolume, fixed_labels: LabelVolume, disp,
               f_m=None, f_f=None, weights: LossWeights = None, rng=None,
               joint_contrast=True):
    """Weighted sum of the three terms plus an unweighted per-term report.

    disp is the displacement Tensor; f_m/f_f are the two feature maps and
    are only touched when lambda_c > 0 (sampling pools both volumes so
    cross-volume same-label pairs act as positives).
    """
    weights = weights or LossWeights()
    u = disp if isinstance(disp, Tensor) else as_tensor(disp)
    oh_m = as_tensor(one_hot(moving_labels.grid, moving_labels.num_classes), like=u)
    oh_f = as_tensor(one_hot(fixed_labels.grid, fixed_labels.num_classes), like=u)
    if moving_labels.num_classes != fixed_labels.num_classes:
        raise ShapeError("total_loss: class count mismatch")

    dice = dice_loss(warp3d(oh_m, u), oh_f)
    smooth = smooth_loss(u)
    report = {"dice": float(dice.data), "smooth": float(smooth.data)}
    total = ops.add(dice, ops.mul(smooth, weights.lambda_s))

    supcon = None
    if weights.lambda_c > 0.0:
        if f_m is None or f_f is None or rng is None:
            raise ValueError("total_loss: lambda_c > 0 needs feature maps and an rng")
        fm_rows, fm_labels = sample_labeled_voxels(f_m, moving_labels,
                                                   weights.samples_per_volume, rng)
        ff_rows, ff_labels = sample_labeled_voxels(f_f, fixed_labels,
                                                   weights.samples_per_volume, rng)
        if joint_contrast:
            supcon = supcon_loss(ops.concat([fm_rows, ff_rows], axis=0),
                                 np.concatenate([fm_labels, ff_labels]), weights.tau)
        else:
            supcon = ops.mul(ops.add(supcon_loss(fm_rows, fm_labels, weights.tau),
                                     supcon_loss(ff_rows, ff_labels, weights.tau)), 0.5)
        report["supcon"] = float(supcon.data)
        total = ops.add(total, ops.mul(supcon, weights.lambda_c))

    report["total"] = float(total.data)
    return total, report, {"dice": dice, "smooth": smooth, "supcon": supcon}
