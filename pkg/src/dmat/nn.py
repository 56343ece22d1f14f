"""Parameter containers and the small layer set shared by the DMAT modules."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(arr: np.ndarray) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = math.sqrt(2.0)) -> np.ndarray:
    return rng.normal(0.0, gain / math.sqrt(fan_in), size=shape).astype(np.float32)


class Module:
    """Holds parameters and child modules as attributes.

    Every Tensor attribute is a parameter; constants are kept as numpy
    arrays. Parameter order follows attribute assignment order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise T.DimensionError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Conv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, stride: int = 1, padding: int | None = None, bias=True):
        self.weight = param(he_normal(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, gain: float = 1.0):
        self.weight = param(he_normal(rng, (d_in, d_out), d_in, gain))
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean(x, -1, keepdims=True)
        d = x - mu
        var = T.mean(d * d, -1, keepdims=True)
        return d * T.power(var + self.eps, -0.5) * self.gamma + self.beta


class InstanceNorm(Module):
    """Per-sample, per-channel normalisation over the spatial axes of NCHW input."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = param(np.ones((1, channels, 1, 1)))
        self.beta = param(np.zeros((1, channels, 1, 1)))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean(x, (2, 3), keepdims=True)
        d = x - mu
        var = T.mean(d * d, (2, 3), keepdims=True)
        return d * T.power(var + self.eps, -0.5) * self.gamma + self.beta
