"""Parameter containers and initializers shared by the learned modules."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numerics as nm
from .numerics import Tensor


class ParamGroup:
    """Base class for parameter bundles.

    Attributes that are Tensors, nested ParamGroups, or dicts/lists of
    Tensors are discovered automatically for checkpointing and Adam.
    """

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in sorted(vars(self)):
            value = getattr(self, name)
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, ParamGroup):
                yield from value.named_tensors(f"{full}.")
            elif isinstance(value, dict):
                for key in sorted(value):
                    item = value[key]
                    if isinstance(item, Tensor):
                        yield f"{full}.{key}", item
                    elif isinstance(item, ParamGroup):
                        yield from item.named_tensors(f"{full}.{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        yield f"{full}.{i}", item
                    elif isinstance(item, ParamGroup):
                        yield from item.named_tensors(f"{full}.{i}.")

    def as_dict(self, prefix: str = "") -> dict[str, Tensor]:
        return dict(self.named_tensors(prefix))

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def freeze(self) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = False


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def param(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(glorot(rng, fan_in, fan_out), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def vector_param(rng: np.random.Generator, dim: int, scale: float = 0.1) -> Tensor:
    return Tensor(scale * rng.standard_normal(dim), requires_grad=True)


class Affine(ParamGroup):
    """y = x @ w + b"""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.w = param(rng, n_in, n_out)
        self.b = zeros_param(n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return nm.matmul(x, self.w) + self.b


class Mlp(ParamGroup):
    """Stack of affine layers with relu between them (none after the last)."""

    def __init__(self, rng: np.random.Generator, widths: list[int]):
        self.layers = [Affine(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = nm.relu(x)
        return x
