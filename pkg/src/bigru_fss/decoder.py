"""U-Net style decoder, the cross-entropy + Dice objective, and the Dice metric."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import (
    ShapeError,
    Tensor,
    add,
    add_scalar,
    concat_channels,
    conv2d,
    div,
    exp,
    getitem,
    log_softmax,
    mean,
    mul,
    one_minus,
    relu,
    scale,
    tsum,
    upsample2d,
)
from .params import Params, conv_params

PREFIX = "dec"
DICE_SMOOTH = 1.0


@dataclass
class SegmentationOutput:
    logits: Tensor
    probabilities: np.ndarray
    mask: np.ndarray


def init_decoder(input_channels: int, widths: Sequence[int], seed: int, dtype=np.float64) -> Params:
    """``widths`` are the encoder stage widths (stage 1 first); skip channels match them."""
    params: Params = {}
    c = input_channels
    for s in range(len(widths), 0, -1):
        w = widths[s - 1]
        conv_params(params, f"{PREFIX}.stage{s}.up", c, w, 3, seed, dtype)
        conv_params(params, f"{PREFIX}.stage{s}.merge", 2 * w, w, 3, seed, dtype)
        c = w
    conv_params(params, f"{PREFIX}.head", c, 2, 1, seed, dtype)
    return params


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-3, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-3, keepdims=True)


def decode(h_bigru: Tensor, skips: Sequence[Tensor], params: Params) -> SegmentationOutput:
    """Upsample from the bottleneck, merging one skip map per stage (deepest first)."""
    n_stages = len(skips)
    if f"{PREFIX}.stage{n_stages}.up.weight" not in params or f"{PREFIX}.stage{n_stages + 1}.up.weight" in params:
        raise ShapeError("decode", f"{n_stages} skip maps do not match the decoder depth")
    x = h_bigru
    for s in range(n_stages, 0, -1):
        skip = skips[s - 1]
        if x.shape[-1] * 2 != skip.shape[-1] or x.shape[-2] * 2 != skip.shape[-2]:
            raise ShapeError("decode", f"stage {s}: {x.shape} cannot be upsampled onto skip {skip.shape}")
        name = f"{PREFIX}.stage{s}"
        x = upsample2d(x, 2)
        x = relu(conv2d(x, params[f"{name}.up.weight"], params[f"{name}.up.bias"], padding=1))
        x = concat_channels(x, skip)
        x = relu(conv2d(x, params[f"{name}.merge.weight"], params[f"{name}.merge.bias"], padding=1))
    logits = conv2d(x, params[f"{PREFIX}.head.weight"], params[f"{PREFIX}.head.bias"])
    probs = softmax_channels(logits.data)
    mask = (probs[..., 1, :, :] > probs[..., 0, :, :]).astype(np.uint8)
    return SegmentationOutput(logits, probs, mask)


def ce_dice_loss(logits: Tensor, label_mask, smooth: float = DICE_SMOOTH) -> Tensor:
    """Mean pixel cross-entropy plus ``1 - soft Dice`` on the foreground channel."""
    y = np.asarray(label_mask)
    if logits.shape[-3] != 2 or logits.shape[:-3] + logits.shape[-2:] != y.shape:
        raise ShapeError("ce_dice_loss", f"logits {logits.shape} do not match label {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("ce_dice_loss: label mask must be binary")
    y_t = Tensor(y.astype(logits.dtype))
    logp = log_softmax(logits, axis=-3)
    lp_bg = getitem(logp, (..., 0, slice(None), slice(None)))
    lp_fg = getitem(logp, (..., 1, slice(None), slice(None)))
    ce = scale(mean(add(mul(lp_fg, y_t), mul(lp_bg, Tensor(1 - y_t.data)))), -1.0)

    p_fg = exp(lp_fg)
    inter = tsum(mul(p_fg, y_t))
    num = add_scalar(scale(inter, 2.0), smooth)
    den = add_scalar(tsum(p_fg), float(y.sum()) + smooth)
    return add(ce, one_minus(div(num, den)))


def dice_score(pred_mask, label_mask) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(label_mask).astype(bool)
    if a.shape != b.shape:
        raise ShapeError("dice_score", f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
