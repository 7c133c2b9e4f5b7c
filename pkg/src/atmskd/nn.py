"""Minimal module containers holding parameters and batch-norm state."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DTYPE, Tensor, parameter


class Module:
    """Base container.

    Parameters, batch-norm states and child modules are discovered from
    instance attributes in assignment order, which fixes the parameter
    naming used by checkpoints.
    """

    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield f"{name}.{i}", child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.op == "parameter":
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_states(self, prefix: str = "") -> Iterator[tuple[str, F.BatchNormState]]:
        for name, value in vars(self).items():
            if isinstance(value, F.BatchNormState):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_states(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return self.forward(x, rng)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int = 0, bias: bool = False):
        self.weight = parameter(np.zeros((out_ch, in_ch, k, k), dtype=DTYPE))
        self.bias = parameter(np.zeros(out_ch, dtype=DTYPE)) if bias else None
        self.stride = stride
        self.padding = padding

    def reset(self, rng: np.random.Generator) -> None:
        # Kaiming fan-in normal
        fan_in = self.weight.shape[1] * self.weight.shape[2] * self.weight.shape[3]
        self.weight.data[...] = rng.standard_normal(self.weight.shape) * math.sqrt(2.0 / fan_in)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def forward(self, x, rng=None):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.gamma = parameter(np.ones(channels, dtype=DTYPE))
        self.beta = parameter(np.zeros(channels, dtype=DTYPE))
        self.state = F.BatchNormState.fresh(channels)

    def forward(self, x, rng=None):
        return F.batchnorm2d(x, self.gamma, self.beta, self.state, self.training)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int):
        self.weight = parameter(np.zeros((in_features, out_features), dtype=DTYPE))
        self.bias = parameter(np.zeros(out_features, dtype=DTYPE))

    def reset(self, rng: np.random.Generator) -> None:
        self.weight.data[...] = rng.standard_normal(self.weight.shape) * math.sqrt(1.0 / self.weight.shape[0])
        self.bias.data[...] = 0.0

    def forward(self, x, rng=None):
        return F.linear(x, self.weight, self.bias)
