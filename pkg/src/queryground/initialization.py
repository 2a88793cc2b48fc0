"""Seeded parameter initialization.

Weights use Xavier-uniform bounds sqrt(6 / (fan_in + fan_out)); biases are
zero-initialized. Fan rules by tensor role: a rank-2 weight (in, out) uses
fan_in=in, fan_out=out; embedding tables follow the same rule on their
(rows, dim) shape; rank-1 vectors are treated as a (1, dim) row.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


def xavier_fan(shape) -> tuple[int, int]:
    if len(shape) == 0:
        raise ValueError("xavier_init: rank must be >= 1")
    if len(shape) == 1:
        return 1, shape[0]
    fan_in = 1
    for n in shape[:-1]:
        fan_in *= n
    return fan_in, shape[-1]


def xavier_init(shape, rng: np.random.Generator, fan: tuple[int, int] | None = None) -> Tensor:
    shape = tuple(int(s) for s in shape)
    fan_in, fan_out = fan if fan is not None else xavier_fan(shape)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_init(shape) -> Tensor:
    return Tensor(np.zeros(tuple(int(s) for s in shape)), requires_grad=True)
