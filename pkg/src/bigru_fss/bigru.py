"""Convolutional GRU cell, bidirectional slice sweep and K-shot summation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    mul,
    one_minus,
    sigmoid,
    tanh,
    zeros,
)
from .params import Params, conv_params

FORWARD = "gru_f"
BACKWARD = "gru_b"


@dataclass(frozen=True)
class GruParams:
    conv_z: Tensor
    b_z: Tensor
    conv_r: Tensor
    b_r: Tensor
    conv_h: Tensor
    b_h: Tensor

    @classmethod
    def from_params(cls, params: Params, prefix: str) -> "GruParams":
        return cls(
            params[f"{prefix}.conv_z.weight"], params[f"{prefix}.conv_z.bias"],
            params[f"{prefix}.conv_r.weight"], params[f"{prefix}.conv_r.bias"],
            params[f"{prefix}.conv_h.weight"], params[f"{prefix}.conv_h.bias"],
        )

    @property
    def hidden_channels(self) -> int:
        return self.conv_z.shape[0]


@dataclass(frozen=True)
class HiddenState:
    h: Tensor
    slice_index: int = -1


def init_gru(prefix: str, input_channels: int, hidden_channels: int, seed: int,
             dtype=np.float64) -> Params:
    params: Params = {}
    for gate in ("conv_z", "conv_r", "conv_h"):
        conv_params(params, f"{prefix}.{gate}", hidden_channels + input_channels,
                    hidden_channels, 3, seed, dtype)
    return params


def init_bigru(input_channels: int, hidden_channels: int, seed: int, dtype=np.float64) -> Params:
    params = init_gru(FORWARD, input_channels, hidden_channels, seed, dtype)
    params.update(init_gru(BACKWARD, input_channels, hidden_channels, seed, dtype))
    return params


def gru_cell(x_t: Tensor, h_prev: HiddenState, params: GruParams,
             slice_index: int | None = None) -> HiddenState:
    """One convolutional GRU update.

    z = sigmoid(conv_z(h (+) x)),  r = sigmoid(conv_r(h (+) x)),
    h_hat = tanh(conv_h((r * h) (+) x)),  h_new = (1 - z) * h + z * h_hat.
    """
    h = h_prev.h
    if h.shape[-2:] != x_t.shape[-2:] or h.ndim != x_t.ndim:
        raise ShapeError("gru_cell", f"hidden {h.shape} and input {x_t.shape} not aligned")
    if h.shape[-3] != params.hidden_channels:
        raise ShapeError("gru_cell", f"hidden has {h.shape[-3]} channels, params expect "
                                     f"{params.hidden_channels}")
    hx = concat_channels(h, x_t)
    z = sigmoid(conv2d(hx, params.conv_z, params.b_z, padding=1))
    r = sigmoid(conv2d(hx, params.conv_r, params.b_r, padding=1))
    h_hat = tanh(conv2d(concat_channels(mul(r, h), x_t), params.conv_h, params.b_h, padding=1))
    h_new = add(mul(one_minus(z), h), mul(z, h_hat))
    idx = h_prev.slice_index + 1 if slice_index is None else slice_index
    return HiddenState(h_new, idx)


def initial_state(x: Tensor, hidden_channels: int) -> HiddenState:
    shape = x.shape[:-3] + (hidden_channels,) + x.shape[-2:]
    return HiddenState(zeros(shape, dtype=x.dtype, requires_grad=False), -1)


def sweep(xs: Sequence[Tensor], params: GruParams, h0: Tensor | None = None,
          reverse: bool = False) -> list[Tensor]:
    """Run one GRU over the sequence; outputs are returned in sequence order."""
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    state = HiddenState(h0, -1) if h0 is not None else initial_state(xs[0], params.hidden_channels)
    out: list[Tensor | None] = [None] * len(xs)
    for t in order:
        state = gru_cell(xs[t], state, params, slice_index=t)
        out[t] = state.h
    return out  # type: ignore[return-value]


def bidirectional(xs: Sequence[Tensor], fwd: GruParams, bwd: GruParams,
                  h0: Tensor | None = None) -> list[Tensor]:
    """Per position, forward state (slices 1..T) concatenated with backward state (T..1)."""
    if not xs:
        raise ShapeError("bidirectional", "empty sequence")
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ShapeError("bidirectional", "sequence elements differ in shape")
    hf = sweep(xs, fwd, h0)
    hb = sweep(xs, bwd, h0, reverse=True)
    return [concat_channels(f, b) for f, b in zip(hf, hb)]


def _digest(seq: Sequence[Tensor]) -> bytes:
    h = hashlib.sha256()
    for t in seq:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.digest()


def kshot_sum(per_support_sequences: Sequence[Sequence[Tensor]]) -> list[Tensor]:
    """Elementwise sum over supports for every slice position.

    Terms are added in a content-determined order, so any permutation of
    the supports gives a bit-identical result.
    """
    if not per_support_sequences:
        raise ShapeError("kshot_sum", "need at least one support sequence")
    length = len(per_support_sequences[0])
    for seq in per_support_sequences:
        if len(seq) != length:
            raise ShapeError("kshot_sum", "support sequences have different lengths")
        for a, b in zip(seq, per_support_sequences[0]):
            if a.shape != b.shape:
                raise ShapeError("kshot_sum", f"ragged shapes {a.shape} vs {b.shape}")
    ordered = sorted(per_support_sequences, key=_digest)
    out = []
    for t in range(length):
        acc = ordered[0][t]
        for seq in ordered[1:]:
            acc = add(acc, seq[t])
        out.append(acc)
    return out
