"""Minimal parameter-container layers used by the networks."""

from __future__ import annotations

import numpy as np

from .engine import Tensor, ops, parameter


class Module:
    """Base with recursive, deterministic parameter discovery."""

    def named_params(self):
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend((f"{key}.{n}", p) for n, p in val.named_params())
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend((f"{key}.{i}.{n}", p) for n, p in item.named_params())
        return out

    def params(self):
        return [p for _, p in self.named_params()]


class Linear(Module):
    def __init__(self, cin, cout, rng, dtype=np.float64, scale=None, bias=True):
        s = (1.0 / np.sqrt(cin)) if scale is None else scale
        self.weight = parameter(rng.normal(0.0, s, size=(cin, cout)), dtype)
        self.bias = parameter(np.zeros(cout), dtype) if bias else None

    def __call__(self, x):
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class Conv3d(Module):
    def __init__(self, cin, cout, rng, kernel=3, stride=1, dtype=np.float64, scale=None):
        s = np.sqrt(2.0 / (kernel ** 3 * cin)) if scale is None else scale
        self.weight = parameter(rng.normal(0.0, s, size=(kernel, kernel, kernel, cin, cout)), dtype)
        self.bias = parameter(np.zeros(cout), dtype)
        self.stride = stride

    def __call__(self, x):
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float64):
        self.gamma = parameter(np.ones(dim), dtype)
        self.beta = parameter(np.zeros(dim), dtype)

    def __call__(self, x):
        return ops.layernorm(x, self.gamma, self.beta)
