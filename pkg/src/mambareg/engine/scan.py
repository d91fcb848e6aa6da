"""First-order linear recurrence h_t = a_t * h_{t-1} + x_t as a graph primitive.

Two evaluation strategies share one adjoint:

* sequential: a plain loop over time, the reference path;
* chunked: the sequence is cut into fixed-size chunks, local scans run
  vectorized across all chunks at once, a carry pass threads the chunk
  boundary states. Recurrence elements compose associatively as
  (a2*a1, a2*b1 + b2), so both strategies compute the same values; the
  composition order is fixed by the chunk size, keeping results
  deterministic for a given configuration.

The adjoint is itself a (reverse-time) linear recurrence and reuses the
same machinery:  gh_t = g_t + a_{t+1} * gh_{t+1},  ga_t = gh_t * h_{t-1},
gx_t = gh_t.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


def _scan_sequential(a, x):
    L = a.shape[1]
    h = np.zeros(a.shape[:1] + a.shape[2:], dtype=a.dtype)
    out = np.empty_like(x)
    for t in range(L):
        h = a[:, t] * h + x[:, t]
        out[:, t] = h
    return out


def _scan_chunked(a, x, chunk):
    B, L = a.shape[:2]
    tail = a.shape[2:]
    S = max(1, int(chunk))
    nc = -(-L // S)
    padded = nc * S
    if padded != L:
        pad = [(0, 0), (0, padded - L)] + [(0, 0)] * len(tail)
        a = np.pad(a, pad, constant_values=1.0)
        x = np.pad(x, pad, constant_values=0.0)
    ac = a.reshape((B, nc, S) + tail)
    xc = x.reshape((B, nc, S) + tail)

    # local scans, vectorized over chunks; P accumulates running products
    hloc = np.empty_like(xc)
    prod = np.empty_like(ac)
    h = xc[:, :, 0].copy()
    p = ac[:, :, 0].copy()
    hloc[:, :, 0] = h
    prod[:, :, 0] = p
    for s in range(1, S):
        h = ac[:, :, s] * h + xc[:, :, s]
        p = p * ac[:, :, s]
        hloc[:, :, s] = h
        prod[:, :, s] = p

    # carry pass over chunk boundaries
    carry = np.zeros((B,) + tail, dtype=a.dtype)
    carries = np.empty((B, nc) + tail, dtype=a.dtype)
    for c in range(nc):
        carries[:, c] = carry
        carry = prod[:, c, S - 1] * carry + hloc[:, c, S - 1]

    out = hloc + prod * carries[:, :, None]
    return out.reshape((B, padded) + tail)[:, :L]


def linear_recurrence(a, x, chunk=None):
    """Scan h_t = a_t * h_{t-1} + x_t along axis 1, h_0 = 0.

    a, x: Tensors of identical shape (B, L, ...). ``chunk=None`` runs the
    sequential loop; an integer runs the chunked evaluation (chunk size 1
    degenerates to the sequential order).
    """
    if a.shape != x.shape:
        raise ShapeError(f"linear_recurrence: a {a.shape} != x {x.shape}")
    if a.ndim < 2:
        raise ShapeError("linear_recurrence: need at least (B, L) axes")
    if chunk is None:
        h = _scan_sequential(a.data, x.data)
    else:
        h = _scan_chunked(a.data, x.data, chunk)

    out = Tensor(h, requires_grad=a.requires_grad or x.requires_grad,
                 op="linear_recurrence", parents=(a, x))
    if out.requires_grad:
        def bwd(g):
            # reverse-time scan with the coefficients shifted one step left
            a_next = np.concatenate([a.data[:, 1:], np.zeros_like(a.data[:, :1])], axis=1)
            ar = a_next[:, ::-1]
            gr = g[:, ::-1]
            if chunk is None:
                gh = _scan_sequential(ar, gr)[:, ::-1]
            else:
                gh = _scan_chunked(ar, gr, chunk)[:, ::-1]
            h_prev = np.concatenate([np.zeros_like(h[:, :1]), h[:, :-1]], axis=1)
            a.accumulate_grad(gh * h_prev)
            x.accumulate_grad(np.ascontiguousarray(gh))
        out._bwd = bwd
    return out
