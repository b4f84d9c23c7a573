"""Support and query encoders.

Each encoder is a VGG-style stack: per stage two 3x3 convolutions with ReLU
followed by 2x2 max pooling.  The support encoder sees a 2-channel
(image, binary label) input and returns only its bottleneck; the query
encoder sees the image alone and also returns its pre-pool stage outputs,
which the decoder consumes as skip connections.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .numerics import Tensor, ShapeError, concat_channels, conv2d, maxpool2d, relu
from .params import Params, conv_params, count_stages

SUPPORT = "enc_s"
QUERY = "enc_q"


def init_encoder(prefix: str, in_channels: int, widths: Sequence[int], seed: int,
                 dtype=np.float64) -> Params:
    params: Params = {}
    c = in_channels
    for s, width in enumerate(widths, start=1):
        conv_params(params, f"{prefix}.stage{s}.conv1", c, width, 3, seed, dtype)
        conv_params(params, f"{prefix}.stage{s}.conv2", width, width, 3, seed, dtype)
        c = width
    return params


def init_encoders(widths: Sequence[int], seed: int, dtype=np.float64) -> Params:
    params = init_encoder(SUPPORT, 2, widths, seed, dtype)
    params.update(init_encoder(QUERY, 1, widths, seed, dtype))
    return params


def _run(x: Tensor, params: Params, prefix: str) -> tuple[Tensor, list[Tensor]]:
    n_stages = count_stages(params, prefix)
    if n_stages == 0:
        raise KeyError(f"no encoder parameters under {prefix!r}")
    h, w = x.shape[-2:]
    if h % 2 ** n_stages or w % 2 ** n_stages:
        raise ShapeError(prefix, f"slice {h}x{w} not divisible by 2^{n_stages}")
    skips = []
    for s in range(1, n_stages + 1):
        for c in ("conv1", "conv2"):
            name = f"{prefix}.stage{s}.{c}"
            x = relu(conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=1))
        skips.append(x)
        x = maxpool2d(x, 2)
    return x, skips


def _as_input(arr) -> Tensor:
    if isinstance(arr, Tensor):
        return arr
    return Tensor(np.asarray(arr))


def encode_support(image_slice, label_slice, params: Params) -> Tensor:
    """Bottleneck features of ``image (+) label``.

    Accepts single ``[H, W]`` slices or stacks ``[N, H, W]``; labels must
    already be binary.  The dtype follows the parameters.
    """
    dtype = params[f"{SUPPORT}.stage1.conv1.weight"].dtype
    img = np.asarray(image_slice, dtype=dtype)
    lbl = np.asarray(label_slice, dtype=dtype)
    if img.shape != lbl.shape or img.ndim not in (2, 3):
        raise ShapeError("encode_support", f"image {img.shape} and label {lbl.shape} must match")
    x = np.stack([img, lbl], axis=-3)
    return _run(Tensor(x), params, SUPPORT)[0]


def encode_query(image_slice, params: Params) -> tuple[Tensor, list[Tensor]]:
    """Bottleneck plus skip maps (highest resolution first)."""
    dtype = params[f"{QUERY}.stage1.conv1.weight"].dtype
    img = np.asarray(image_slice, dtype=dtype)
    if img.ndim not in (2, 3):
        raise ShapeError("encode_query", f"expected [H,W] or [N,H,W], got {img.shape}")
    return _run(Tensor(img[..., None, :, :]), params, QUERY)


def fuse(support_feat: Tensor, query_feat: Tensor) -> Tensor:
    """Channel concatenation, support channels first."""
    return concat_channels(support_feat, query_feat)
