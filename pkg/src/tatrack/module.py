"""Parameter containers: a tiny module tree with dotted parameter names."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Param


class Module:
    training: bool = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Param, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Param, Module)):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, (Param, Module)):
                        yield f"{name}.{key}", item

    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Param):
                yield full, child
            else:
                yield from child.named_params(full + ".")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield f"{prefix}{name}", buf
        for name, child in self._children():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_trainable(self, flag: bool) -> None:
        for p in self.params():
            p.set_trainable(flag)

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.size for p in self.params())


def xavier_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(T.get_default_dtype())


def trunc_normal(rng: np.random.Generator, shape: tuple, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    return (np.clip(x, -2.0, 2.0) * std).astype(T.get_default_dtype())


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=T.get_default_dtype())


def ones(shape) -> np.ndarray:
    return np.ones(shape, dtype=T.get_default_dtype())


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gamma = Param(ones(dim))
        self.beta = Param(zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    """``x @ weight + bias`` with weight stored as [in, out]."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, init: str = "xavier"):
        super().__init__()
        if init == "xavier":
            w = xavier_uniform(rng, (d_in, d_out), d_in, d_out)
        else:
            w = trunc_normal(rng, (d_in, d_out))
        self.weight = Param(w)
        self.bias = Param(zeros(d_out))

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv1x1(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        super().__init__()
        self.weight = Param(xavier_uniform(rng, (c_out, c_in), c_in, c_out))
        self.bias = Param(zeros(c_out))

    def __call__(self, x):
        return T.conv1x1(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Param(ones(channels))
        self.beta = Param(zeros(channels))
        self.register_buffer("running_mean", zeros(channels))
        self.register_buffer("running_var", ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self._buffers["running_mean"],
                            self._buffers["running_var"], self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        super().__init__()
        self.conv = Conv1x1(rng, c_in, c_out)
        self.bn = BatchNorm(c_out)

    def __call__(self, x):
        return T.relu(self.bn(self.conv(x)))
