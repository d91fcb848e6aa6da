"""Dense tensors with a reverse-mode autodiff graph.

Every op in the package builds the graph eagerly: calling an op computes
its value immediately and records a closure that pushes gradients to the
parents. ``Tensor.backward()`` runs the closures in reverse topological
order. Graphs are single-threaded; evaluated values are never mutated, so
finished tensors are safe to share across threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


class ShapeError(ValueError):
    """Shape mismatch at graph construction, names the offending op."""


class NumericError(ArithmeticError):
    """NaN/inf detected during evaluation, names the offending node."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._bwd = None

    # -- basic introspection -------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.grad is not None})"

    # -- gradient plumbing ---------------------------------------------

    def accumulate_grad(self, g):
        """Additively accumulate an upstream gradient (fan-out sums)."""
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != value shape {self.data.shape} at node {self.op!r}"
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, nan_check=False):
        """Reverse-mode sweep from a scalar output.

        Populates ``.grad`` on every reachable tensor with requires_grad.
        Reachable gradients are reset first, so repeated sweeps (possibly
        from different roots over a shared graph) each yield the pure
        gradient of their own root. ``nan_check`` looks for NaN in each
        node's gradient and raises NumericError naming the node (costly;
        off in hot loops).
        """
        if self.data.ndim != 0:
            raise ShapeError(f"backward needs a scalar output, got shape {self.shape}")
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            if node._bwd is None or node.grad is None:
                continue
            if nan_check and not np.all(np.isfinite(node.grad)):
                raise NumericError(f"non-finite gradient at node {node.op!r}")
            node._bwd(node.grad)

    # -- operator sugar (implementations live in ops.py) ----------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __pow__(self, p):
        from . import ops

        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops

        return ops.tslice(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, axes):
        from . import ops

        return ops.transpose(self, axes)


def as_tensor(x, dtype=None, like=None):
    """Wrap a value as a constant (no-grad) Tensor."""
    if isinstance(x, Tensor):
        return x
    if dtype is None and like is not None:
        dtype = like.dtype
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def parameter(data, dtype=np.float64):
    """A learnable leaf."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _toposort(root):
    """Iterative postorder over the DAG (graphs can be deep)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(output, leaves, nan_check=False):
    """Run backward and return {leaf: gradient array} for the given leaves."""
    for leaf in leaves:
        leaf.zero_grad()
    output.backward(nan_check=nan_check)
    return {leaf: (np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad) for leaf in leaves}


def parallel_map(fn, items, workers=None):
    """Map over independent items, optionally on a thread pool.

    Each item must build its own graph; results match the sequential path
    exactly because the per-item computations do not interact.
    """
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
