"""Differentiable primitives. Each op computes eagerly and registers a
closed-form adjoint closure on the output node."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor


def _unbroadcast(g, shape):
    """Sum a gradient down to the original operand shape after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(a, b, name):
    a = as_tensor(a) if not isinstance(a, Tensor) else a
    b = as_tensor(b, like=a) if not isinstance(b, Tensor) else b
    return a, b


# -- arithmetic ----------------------------------------------------------


def add(a, b):
    a, b = _binary(a, b, "add")
    try:
        val = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}: {e}") from None
    out = Tensor(val, requires_grad=a.requires_grad or b.requires_grad, op="add", parents=(a, b))
    if out.requires_grad:
        def bwd(g):
            a.accumulate_grad(_unbroadcast(g, a.shape))
            b.accumulate_grad(_unbroadcast(g, b.shape))
        out._bwd = bwd
    return out


def mul(a, b):
    a, b = _binary(a, b, "mul")
    try:
        val = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}: {e}") from None
    out = Tensor(val, requires_grad=a.requires_grad or b.requires_grad, op="mul", parents=(a, b))
    if out.requires_grad:
        def bwd(g):
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))
        out._bwd = bwd
    return out


def neg(a):
    out = Tensor(-a.data, requires_grad=a.requires_grad, op="neg", parents=(a,))
    if out.requires_grad:
        out._bwd = lambda g: a.accumulate_grad(-g)
    return out


def sub(a, b):
    a, b = _binary(a, b, "sub")
    return add(a, neg(b))


def power(a, p):
    """Elementwise a**p for scalar exponent p."""
    if not isinstance(p, (int, float)):
        raise TypeError("power: exponent must be a python scalar")
    out = Tensor(a.data ** p, requires_grad=a.requires_grad, op=f"pow{p}", parents=(a,))
    if out.requires_grad:
        out._bwd = lambda g: a.accumulate_grad(g * p * a.data ** (p - 1))
    return out


def div(a, b):
    a, b = _binary(a, b, "div")
    return mul(a, power(b, -1.0))


def matmul(a, b):
    """a @ b with b restricted to 2-D (linear maps); a may carry batch dims."""
    a, b = _binary(a, b, "matmul")
    if b.ndim != 2 or a.ndim < 2:
        raise ShapeError(f"matmul: need a.ndim>=2 and b.ndim==2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad,
                 op="matmul", parents=(a, b))
    if out.requires_grad:
        def bwd(g):
            a.accumulate_grad(g @ b.data.T)
            k = a.shape[-1]
            b.accumulate_grad(a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1]))
        out._bwd = bwd
    return out


# -- pointwise nonlinearities -------------------------------------------


def exp(a):
    val = np.exp(a.data)
    out = Tensor(val, requires_grad=a.requires_grad, op="exp", parents=(a,))
    if out.requires_grad:
        out._bwd = lambda g: a.accumulate_grad(g * val)
    return out


def log(a):
    out = Tensor(np.log(a.data), requires_grad=a.requires_grad, op="log", parents=(a,))
    if out.requires_grad:
        out._bwd = lambda g: a.accumulate_grad(g / a.data)
    return out


def sigmoid(a):
    s = expit(a.data)
    out = Tensor(s, requires_grad=a.requires_grad, op="sigmoid", parents=(a,))
    if out.requires_grad:
        out._bwd = lambda g: a.accumulate_grad(g * s * (1.0 - s))
    return out


def silu(a):
    s = expit(a.data)
    out = Tensor(a.data * s, requires_grad=a.requires_grad, op="silu", parents=(a,))
    if out.requires_grad:
        out._bwd = lambda g: a.accumulate_grad(g * s * (1.0 + a.data * (1.0 - s)))
    return out


def softplus(a):
    val = np.logaddexp(0.0, a.data)
    out = Tensor(val, requires_grad=a.requires_grad, op="softplus", parents=(a,))
    if out.requires_grad:
        out._bwd = lambda g: a.accumulate_grad(g * expit(a.data))
    return out


# -- reductions ----------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    val = a.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor(val, requires_grad=a.requires_grad, op="sum", parents=(a,))
    if out.requires_grad:
        def bwd(g):
            gg = g
            if not keepdims and axis is not None:
                axes = (axis,) if isinstance(axis, int) else tuple(axis)
                axes = tuple(ax % a.ndim for ax in axes)
                gg = np.expand_dims(gg, axes)
            a.accumulate_grad(np.ascontiguousarray(np.broadcast_to(gg, a.shape)))
        out._bwd = bwd
    return out


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ---------------------------------------------------


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad, op="reshape", parents=(a,))
    if out.requires_grad:
        out._bwd = lambda g: a.accumulate_grad(g.reshape(a.shape))
    return out


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)),
                 requires_grad=a.requires_grad, op="transpose", parents=(a,))
    if out.requires_grad:
        out._bwd = lambda g: a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))
    return out


def concat(ts, axis=0):
    ts = [as_tensor(t) for t in ts]
    val = np.concatenate([t.data for t in ts], axis=axis)
    out = Tensor(val, requires_grad=any(t.requires_grad for t in ts), op="concat", parents=tuple(ts))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)
        def bwd(g):
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(np.ascontiguousarray(g[tuple(idx)]))
        out._bwd = bwd
    return out


def tslice(a, idx):
    """Basic (non-advanced) slicing."""
    out = Tensor(np.ascontiguousarray(a.data[idx]), requires_grad=a.requires_grad,
                 op="slice", parents=(a,))
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            a.accumulate_grad(full)
        out._bwd = bwd
    return out


def take_rows(a, idx):
    """Gather rows of a 2-D tensor by integer index (with repeats)."""
    if a.ndim != 2:
        raise ShapeError(f"take_rows: need 2-D input, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx], requires_grad=a.requires_grad, op="take_rows", parents=(a,))
    if out.requires_grad:
        def bwd(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a.accumulate_grad(full)
        out._bwd = bwd
    return out


# -- normalizations --------------------------------------------------------


def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(val, requires_grad=a.requires_grad, op="softmax", parents=(a,))
    if out.requires_grad:
        def bwd(g):
            dot = (g * val).sum(axis=axis, keepdims=True)
            a.accumulate_grad(val * (g - dot))
        out._bwd = bwd
    return out


def l2normalize(a, axis=-1, eps=1e-12):
    n = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True) + eps)
    val = a.data / n
    out = Tensor(val, requires_grad=a.requires_grad, op="l2normalize", parents=(a,))
    if out.requires_grad:
        def bwd(g):
            dot = (g * a.data).sum(axis=axis, keepdims=True)
            a.accumulate_grad(g / n - a.data * dot / n ** 3)
        out._bwd = bwd
    return out


def layernorm(a, gamma, beta, eps=1e-5):
    """Layer normalization over the last (channel) axis."""
    gamma, beta = as_tensor(gamma, like=a), as_tensor(beta, like=a)
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError(f"layernorm: gamma/beta must be ({a.shape[-1]},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    val = xhat * gamma.data + beta.data
    out = Tensor(val, requires_grad=a.requires_grad or gamma.requires_grad or beta.requires_grad,
                 op="layernorm", parents=(a, gamma, beta))
    if out.requires_grad:
        def bwd(g):
            sum_axes = tuple(range(a.ndim - 1))
            beta.accumulate_grad(g.sum(axis=sum_axes))
            gamma.accumulate_grad((g * xhat).sum(axis=sum_axes))
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a.accumulate_grad((gx - m1 - xhat * m2) * inv)
        out._bwd = bwd
    return out


# -- convolutions ----------------------------------------------------------


def conv3d(x, w, b=None, stride=1, padding=None):
    """3-D convolution, channels-last.

    x: (H, W, D, Cin); w: (k, k, k, Cin, Cout); b: (Cout,) or None.
    Computed as shift-and-matmul over kernel offsets (fast under BLAS).
    """
    if x.ndim != 4 or w.ndim != 5:
        raise ShapeError(f"conv3d: x {x.shape}, w {w.shape}")
    k = w.shape[0]
    if w.shape[1] != k or w.shape[2] != k or w.shape[3] != x.shape[-1]:
        raise ShapeError(f"conv3d: weight {w.shape} incompatible with input {x.shape}")
    p = k // 2 if padding is None else padding
    s = stride
    H, W, D, cin = x.shape
    cout = w.shape[-1]
    Ho, Wo, Do = ((H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1, (D + 2 * p - k) // s + 1)
    if min(Ho, Wo, Do) < 1:
        raise ShapeError(f"conv3d: output would be empty for input {x.shape}, k={k}, s={s}, p={p}")

    xp = np.pad(x.data, ((p, p), (p, p), (p, p), (0, 0))) if p else x.data
    wm = w.data.reshape(k * k * k, cin, cout)
    acc = np.zeros((Ho * Wo * Do, cout), dtype=x.dtype)
    n = 0
    for i in range(k):
        for j in range(k):
            for l in range(k):
                sl = xp[i:i + s * Ho:s, j:j + s * Wo:s, l:l + s * Do:s, :]
                acc += sl.reshape(-1, cin) @ wm[n]
                n += 1
    val = acc.reshape(Ho, Wo, Do, cout)
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv3d: bias {b.shape} != ({cout},)")
        val = val + b.data

    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(val, requires_grad=any(t.requires_grad for t in parents), op="conv3d",
                 parents=parents)
    if out.requires_grad:
        def bwd(g):
            gf = g.reshape(-1, cout)
            if b is not None:
                b.accumulate_grad(gf.sum(axis=0))
            gw = np.empty_like(w.data)
            gxp = np.zeros_like(xp)
            n = 0
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        sl = xp[i:i + s * Ho:s, j:j + s * Wo:s, l:l + s * Do:s, :]
                        gw[i, j, l] = sl.reshape(-1, cin).T @ gf
                        gxp[i:i + s * Ho:s, j:j + s * Wo:s, l:l + s * Do:s, :] += \
                            (gf @ wm[n].T).reshape(Ho, Wo, Do, cin)
                        n += 1
            w.accumulate_grad(gw)
            x.accumulate_grad(gxp[p:p + H, p:p + W, p:p + D, :] if p else gxp)
        out._bwd = bwd
    return out


def conv1d_depthwise(x, w, b=None):
    """Causal per-channel 1-D convolution over the sequence axis.

    x: (B, L, E); w: (K, E). Left-padded so y_t only sees u_{<=t}.
    """
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[2]:
        raise ShapeError(f"conv1d_depthwise: x {x.shape}, w {w.shape}")
    B, L, E = x.shape
    K = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (K - 1, 0), (0, 0)))
    val = np.zeros_like(x.data)
    for kk in range(K):
        val += xp[:, kk:kk + L, :] * w.data[kk]
    if b is not None:
        val = val + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(val, requires_grad=any(t.requires_grad for t in parents),
                 op="conv1d_depthwise", parents=parents)
    if out.requires_grad:
        def bwd(g):
            if b is not None:
                b.accumulate_grad(g.sum(axis=(0, 1)))
            gw = np.empty_like(w.data)
            gxp = np.zeros_like(xp)
            for kk in range(K):
                gw[kk] = (xp[:, kk:kk + L, :] * g).sum(axis=(0, 1))
                gxp[:, kk:kk + L, :] += g * w.data[kk]
            w.accumulate_grad(gw)
            x.accumulate_grad(gxp[:, K - 1:, :])
        out._bwd = bwd
    return out


def upsample_nearest3d(x, factor=2):
    """Nearest-neighbor upsampling on the three spatial axes, channels-last."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest3d: need (H,W,D,C), got {x.shape}")
    f = int(factor)
    val = x.data.repeat(f, axis=0).repeat(f, axis=1).repeat(f, axis=2)
    out = Tensor(val, requires_grad=x.requires_grad, op="upsample_nearest3d", parents=(x,))
    if out.requires_grad:
        H, W, D, C = x.shape
        def bwd(g):
            x.accumulate_grad(g.reshape(H, f, W, f, D, f, C).sum(axis=(1, 3, 5)))
        out._bwd = bwd
    return out
