"""Minimal module system: parameters, layers and state handling."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .functional import RunningStats
from .rng import stream
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Init:
    """Weight initializer; each parameter draws from its own named stream."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def normal(self, name: str, shape, std: float) -> Parameter:
        values = stream(self.seed, "init", name).standard_normal(shape) * std
        return Parameter(values, name=name)

    def he(self, name: str, shape) -> Parameter:
        fan_in = math.prod(shape[1:])
        return self.normal(name, shape, math.sqrt(2.0 / fan_in))

    @staticmethod
    def const(name: str, shape, value: float) -> Parameter:
        return Parameter(np.full(shape, float(value)), name=name)


class Module:
    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield f"{key}.{k}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, RunningStats]]:
        for key, value in vars(self).items():
            if isinstance(value, RunningStats):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

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

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, stats in self.named_buffers():
            state[f"{name}.mean"] = stats.mean.copy()
            state[f"{name}.var"] = stats.var.copy()
            state[f"{name}.count"] = np.array([stats.count], dtype=np.float64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} vs {p.shape}")
            p.data[...] = state[name]
        for name, stats in self.named_buffers():
            stats.mean = np.array(state[f"{name}.mean"], dtype=np.float64)
            stats.var = np.array(state[f"{name}.var"], dtype=np.float64)
            stats.count = int(np.asarray(state[f"{name}.count"]).reshape(-1)[0])

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv(Module):
    """Bias-free convolution; 2-D or 3-D according to the kernel rank."""

    def __init__(self, c_in: int, c_out: int, kernel, stride=1, padding=None, *, init: Init, name: str):
        self.kernel = tuple(kernel)
        d = len(self.kernel)
        self.stride = (stride,) * d if np.isscalar(stride) else tuple(stride)
        self.padding = tuple(k // 2 for k in self.kernel) if padding is None else tuple(padding)
        self.weight = init.he(f"{name}.weight", (c_out, c_in, *self.kernel))

    def forward(self, x: Tensor) -> Tensor:
        op = F.conv3d if len(self.kernel) == 3 else F.conv2d
        return op(x, self.weight, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, *, name: str, zero_init: bool = False, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.gamma = Init.const(f"{name}.gamma", (channels,), 0.0 if zero_init else 1.0)
        self.beta = Init.const(f"{name}.beta", (channels,), 0.0)
        self.stats = RunningStats.zeros(channels)
        self.eps, self.momentum = eps, momentum

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.training, self.stats, self.eps, self.momentum)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, *, init: Init, name: str, bias: bool = True,
                 std: float | None = None):
        if std is None:
            self.weight = init.he(f"{name}.weight", (c_out, c_in))
        else:
            self.weight = init.normal(f"{name}.weight", (c_out, c_in), std)
        self.bias = Init.const(f"{name}.bias", (c_out,), 0.0) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.fully_connected(x, self.weight, self.bias)
