"""Small parameter containers built on tensorcore."""
from __future__ import annotations

import numpy as np

from .tensorcore import Parameter, ops


class Module:
    """Holds Parameters and child Modules; names are dotted paths."""

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                out[value.name] = value
            elif isinstance(value, Module):
                out.update(value.parameters())
            elif isinstance(value, dict):
                for v in value.values():
                    if isinstance(v, Module):
                        out.update(v.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for value in vars(self).values():
            if isinstance(value, Module):
                out.update(value.buffers())
            elif isinstance(value, dict):
                for v in value.values():
                    if isinstance(v, Module):
                        out.update(v.buffers())
        return out


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, rng, init: str = "fan_in"):
        if init == "fan_in":
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, (d_in, d_out))
            b = rng.uniform(-bound, bound, d_out)
        elif init == "xavier":
            bound = np.sqrt(6.0 / (d_in + d_out))
            w = rng.uniform(-bound, bound, (d_in, d_out))
            b = np.zeros(d_out)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(b, f"{name}.bias")

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, name: str, d: int):
        self.gamma = Parameter(np.ones(d), f"{name}.gamma")
        self.beta = Parameter(np.zeros(d), f"{name}.beta")

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)


class BatchNorm(Module):
    def __init__(self, name: str, d: int, momentum: float = 0.1):
        self.name = name
        self.gamma = Parameter(np.ones(d), f"{name}.gamma")
        self.beta = Parameter(np.zeros(d), f"{name}.beta")
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)
        self.momentum = momentum

    def __call__(self, x, ctx, mask=None):
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=ctx.training, mask=mask, momentum=self.momentum)

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


class MLPHead(Module):
    """FC16+ReLU (+dropout) -> FC8+ReLU -> FC1+sigmoid, returning shape [B]."""

    def __init__(self, name: str, d_in: int, rng, dropout: float = 0.4):
        self.fc1 = Linear(f"{name}.fc1", d_in, 16, rng)
        self.fc2 = Linear(f"{name}.fc2", 16, 8, rng)
        self.fc3 = Linear(f"{name}.fc3", 8, 1, rng)
        self.dropout = dropout

    def __call__(self, x, ctx):
        h = ops.dropout(ops.relu(self.fc1(x)), self.dropout, ctx.rng, ctx.training)
        h = ops.relu(self.fc2(h))
        return ops.reshape(ops.sigmoid(self.fc3(h)), x.shape[:-1])
