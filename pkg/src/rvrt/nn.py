"""Parameter containers and the small layers shared by the model."""

from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from .tensor import Tensor, default_dtype, ops


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def conv_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Walks attributes in definition order to collect parameters.

    Parameters are Tensors with ``requires_grad``; submodules and lists of
    submodules are recursed into.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def param(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype or default_dtype())


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = param(trunc_normal(rng, (cin, cout)))
        self.bias = param(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, zero: bool = False):
        shape = (k, k, cin, cout)
        self.weight = param(np.zeros(shape) if zero else conv_uniform(rng, shape))
        self.bias = param(np.zeros(cout))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, c: int):
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta)


class Mlp(Module):
    def __init__(self, c: int, hidden: int, rng: np.random.Generator, bias: bool = True):
        self.fc1 = Linear(c, hidden, rng, bias=bias)
        self.fc2 = Linear(hidden, c, rng, bias=bias)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))
