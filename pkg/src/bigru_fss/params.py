"""Named parameter maps shared by the network modules."""

from __future__ import annotations

import zlib
from typing import Dict

import numpy as np

from .numerics import Tensor, he_init, zeros

Params = Dict[str, Tensor]


def param_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


def conv_params(params: Params, name: str, c_in: int, c_out: int, k: int, seed: int, dtype) -> None:
    params[f"{name}.weight"] = he_init((c_out, c_in, k, k), c_in * k * k,
                                       param_seed(seed, f"{name}.weight"), dtype=dtype)
    params[f"{name}.bias"] = zeros((c_out,), dtype=dtype)


def count_stages(params: Params, prefix: str) -> int:
    n = 0
    while f"{prefix}.stage{n + 1}.conv1.weight" in params:
        n += 1
    return n


def subset(params: Params, prefix: str) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefix + ".")}


def clone(params: Params, requires_grad: bool | None = None) -> Params:
    return {
        k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad)
        for k, v in params.items()
    }
