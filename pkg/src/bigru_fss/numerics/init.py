from __future__ import annotations

import numpy as np

from .tensor import Tensor


def he_init(shape, fan_in: int, rng_seed, dtype=np.float64, requires_grad: bool = True) -> Tensor:
    """Draw from N(0, sqrt(2 / fan_in)); identical seeds give identical tensors.

    ``rng_seed`` may be an int, a sequence of ints or a ``SeedSequence``.
    """
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    rng = np.random.default_rng(rng_seed)
    std = np.sqrt(2.0 / fan_in)
    data = rng.normal(0.0, std, size=tuple(shape)).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, dtype=np.float64, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)
