"""Helpers for walking nested parameter containers.

Parameter containers are dataclasses whose fields hold ``Tensor`` leaves,
other containers, or lists of containers. Paths are dotted strings such as
``msbt.layers.0.condense_a.wq`` and are stable across runs.
"""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .autodiff import Tensor


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                continue
            yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}")
    elif isinstance(obj, dict):
        for key in obj:
            yield from named_parameters(obj[key], f"{prefix}.{key}")


def parameters(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def count_parameters(obj) -> int:
    return sum(t.size for t in parameters(obj))


def zero_grad(obj) -> None:
    for t in parameters(obj):
        t.grad = None


def uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)
