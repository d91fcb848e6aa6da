"""Selective state-space sequence machinery.

The recurrence runs per batch item and channel e over a hidden state of
size N:

    h_t = exp(dt_t * A_e) * h_{t-1} + (dt_t * B_t) * u_t        h_0 = 0
    y_t = <C_t, h_t> + D_e * u_t

with zero-order hold on the state transition and an Euler rule on the
input map. A is stored as log-magnitude and realized strictly negative, so
the state decays for any parameter values the optimizer can reach.
"""

from __future__ import annotations

import numpy as np

from .engine import NumericError, ShapeError, as_tensor, linear_recurrence, ops, parameter
from .layers import LayerNorm, Linear, Module


def sinusoidal_position_embedding(length, channels, dtype=np.float64):
    """Classic sin/cos table: pe[p, 2i] = sin(p / 10000^(2i/C)), odd cols cos."""
    if channels % 2 != 0:
        raise ValueError(f"channel count must be even, got {channels}")
    pos = np.arange(length, dtype=dtype)[:, None]
    i2 = np.arange(0, channels, 2, dtype=dtype)
    angle = pos / np.power(10000.0, i2 / channels)
    pe = np.empty((length, channels), dtype=dtype)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def _selective_scan(u, delta, A, B_t, C_t, D, chunk):
    u, delta, A, B_t, C_t, D = (as_tensor(v) for v in (u, delta, A, B_t, C_t, D))
    if u.ndim != 3:
        raise ShapeError(f"selective scan: u must be (B, L, E), got {u.shape}")
    Bn, L, E = u.shape
    if A.ndim != 2 or A.shape[0] != E:
        raise ShapeError(f"selective scan: A must be (E, N), got {A.shape}")
    N = A.shape[1]
    if delta.shape != (Bn, L, E):
        raise ShapeError(f"selective scan: delta {delta.shape} != u shape {u.shape}")
    if B_t.shape != (Bn, L, N) or C_t.shape != (Bn, L, N):
        raise ShapeError(f"selective scan: B_t/C_t must be ({Bn}, {L}, {N})")
    if D.shape != (E,):
        raise ShapeError(f"selective scan: D must be ({E},)")
    if np.any(delta.data <= 0.0):
        raise ValueError("selective scan: delta must be strictly positive")

    dte = ops.reshape(delta, (Bn, L, E, 1))
    a = ops.exp(ops.mul(dte, ops.reshape(A, (1, 1, E, N))))
    x = ops.mul(ops.mul(dte, ops.reshape(u, (Bn, L, E, 1))),
                ops.reshape(B_t, (Bn, L, 1, N)))
    h = linear_recurrence(a, x, chunk=chunk)
    y = ops.tsum(ops.mul(h, ops.reshape(C_t, (Bn, L, 1, N))), axis=-1)
    y = ops.add(y, ops.mul(u, D))

    if not np.all(np.isfinite(y.data)):
        bad = np.where(~np.isfinite(y.data).all(axis=(0, 2)))[0]
        raise NumericError(f"selective scan: non-finite output first at timestep {int(bad[0])}")
    return y


def selective_scan(u, delta, A, B_t, C_t, D):
    """Reference evaluation: plain sequential recurrence over time."""
    return _selective_scan(u, delta, A, B_t, C_t, D, chunk=None)


def selective_scan_parallel(u, delta, A, B_t, C_t, D, chunk=64):
    """Chunked associative evaluation of the same recurrence.

    Mathematically identical to :func:`selective_scan`; chunk size 1
    degenerates to the sequential composition order.
    """
    return _selective_scan(u, delta, A, B_t, C_t, D, chunk=int(chunk))


class SsmLayer(Module):
    """Input-dependent state-space core at width E."""

    def __init__(self, width, state_dim, rng, dtype=np.float64):
        E, N = width, state_dim
        self.a_log = parameter(np.log(np.tile(np.arange(1.0, N + 1.0), (E, 1))), dtype)
        self.skip = parameter(np.ones(E), dtype)
        self.b_proj = Linear(E, N, rng, dtype, bias=False)
        self.c_proj = Linear(E, N, rng, dtype, bias=False)
        dt_init = rng.uniform(1e-3, 1e-1, size=E)
        self.dt_proj = Linear(E, E, rng, dtype, scale=1.0 / np.sqrt(E) * 0.1)
        self.dt_proj.bias.data[:] = np.log(np.expm1(dt_init))
        self.state_dim = N

    def realized_a(self):
        return ops.neg(ops.exp(self.a_log))

    def __call__(self, u, chunk=64):
        delta = ops.softplus(self.dt_proj(u))
        return _selective_scan(u, delta, self.realized_a(), self.b_proj(u),
                               self.c_proj(u), self.skip, chunk=chunk)


class MambaBlock(Module):
    """Gated selective-SSM block: shape (B, L, C) in and out.

    Pre-norm, linear projection to a main and a gate branch at width E,
    causal depthwise conv + silu + SSM on the main branch, silu gate,
    linear back to C, residual add.
    """

    def __init__(self, channels, rng, state_dim=8, expand=2, conv_kernel=4, dtype=np.float64):
        C = channels
        E = expand * C
        self.norm = LayerNorm(C, dtype)
        self.in_proj = Linear(C, 2 * E, rng, dtype)
        self.conv_w = parameter(rng.normal(0.0, 1.0 / np.sqrt(conv_kernel), size=(conv_kernel, E)), dtype)
        self.conv_b = parameter(np.zeros(E), dtype)
        self.ssm = SsmLayer(E, state_dim, rng, dtype)
        self.out_proj = Linear(E, C, rng, dtype)
        self.width = E

    def __call__(self, x, chunk=64):
        if x.ndim != 3:
            raise ShapeError(f"mamba block: need (B, L, C), got {x.shape}")
        E = self.width
        z = self.in_proj(self.norm(x))
        main, gate = z[:, :, :E], z[:, :, E:]
        main = ops.silu(ops.conv1d_depthwise(main, self.conv_w, self.conv_b))
        y = self.ssm(main, chunk=chunk)
        y = ops.mul(y, ops.silu(gate))
        return ops.add(x, self.out_proj(y))


class MambaStage(Module):
    """A fixed number of blocks applied in sequence at one token scale."""

    def __init__(self, channels, n_blocks, rng, state_dim=8, expand=2, conv_kernel=4,
                 dtype=np.float64):
        self.blocks = [MambaBlock(channels, rng, state_dim, expand, conv_kernel, dtype)
                       for _ in range(n_blocks)]

    def __call__(self, x, chunk=64):
        for blk in self.blocks:
            x = blk(x, chunk=chunk)
        return x
