"""Parameter containers and the small layer set the model is assembled from."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .functional import BatchNormState
from .tensor import Tensor


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


class Module:
    """Walks attributes in definition order to find parameters and submodules."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor, BatchNormState)):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, (Module, Tensor, BatchNormState)):
                        yield f"{name}.{key}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def named_batchnorm_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, BatchNormState):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_batchnorm_states(full + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = parameter(rng.normal(0.0, std, size=(d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """He-normal initialised 2-D convolution."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
    ):
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in // groups, kernel, kernel)))
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.state = BatchNormState.fresh(channels, momentum, eps)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.batchnorm2d(x, self.gamma, self.beta, self.state, training)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.gamma, self.beta, self.eps)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def set_parameter(module: Module, name: str, value: np.ndarray) -> None:
    """Overwrite a named parameter in place (shape must match)."""
    params = dict(module.named_parameters())
    target: Optional[Tensor] = params.get(name)
    if target is None:
        raise KeyError(name)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != target.shape:
        raise ValueError(f"{name}: shape {value.shape} does not match {target.shape}")
    target.data[...] = value
