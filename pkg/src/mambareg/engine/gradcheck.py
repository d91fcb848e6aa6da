"""Central-difference validation of analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


def finite_difference_check(fn, leaf, eps=1e-5, max_entries=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    fn: zero-argument callable rebuilding the scalar-output graph (it must
    read ``leaf`` so perturbations of ``leaf.data`` are visible and must be
    deterministic across calls). Returns
    max over checked entries of |analytic - fd| / (|analytic| + |fd| + 1e-12).

    ``max_entries`` caps the number of perturbed entries (deterministic
    subsample under ``seed``); None checks every entry.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(leaf, Tensor) or not leaf.requires_grad:
        raise ValueError("leaf must be a Tensor with requires_grad=True")

    out = fn()
    if out.data.ndim != 0:
        raise ShapeError(f"finite_difference_check: fn must return a scalar, got {out.shape}")
    leaf.zero_grad()
    out.backward()
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()

    n = leaf.data.size
    if max_entries is not None and max_entries < n:
        rng = np.random.default_rng(seed)
        entries = rng.choice(n, size=max_entries, replace=False)
    else:
        entries = np.arange(n)

    flat = leaf.data.reshape(-1)
    ana = analytic.reshape(-1)
    worst = 0.0
    for i in entries:
        keep = flat[i]
        flat[i] = keep + eps
        fp = float(fn().data)
        flat[i] = keep - eps
        fm = float(fn().data)
        flat[i] = keep
        fd = (fp - fm) / (2.0 * eps)
        rel = abs(ana[i] - fd) / (abs(ana[i]) + abs(fd) + 1e-12)
        worst = max(worst, rel)
    return worst
