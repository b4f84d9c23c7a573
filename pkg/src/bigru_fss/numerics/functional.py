"""Spatial operators on ``[C, H, W]`` or batched ``[N, C, H, W]`` tensors."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, concat, make_node, note_branch


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(op, f"expected [C,H,W] or [N,C,H,W], got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with zero padding.

    Implemented as im2col followed by one matrix product; the column
    buffer is kept for the backward pass.
    """
    xd, squeeze = _batched(x, "conv2d")
    if kernel.ndim != 4:
        raise ShapeError("conv2d", f"kernel must be [C_out,C_in,k,k], got {kernel.shape}")
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError("conv2d", f"input has {c_in} channels, kernel expects {kc}")
    if kh != kw:
        raise ShapeError("conv2d", f"kernel must be square, got {kh}x{kw}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError("conv2d", f"bias shape {bias.shape} != ({c_out},)")
    if stride < 1:
        raise ShapeError("conv2d", f"stride must be >= 1, got {stride}")
    k, p, s = kh, padding, stride
    if k > h + 2 * p or k > w + 2 * p:
        raise ShapeError("conv2d", f"kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = np.empty((c_in, k, k, n, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c_in * k * k, n * ho * wo)
    w2 = kernel.data.reshape(c_out, -1)
    out = (w2 @ cols2).reshape(c_out, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if squeeze:
        out = out[0]

    def back(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gk = (g2 @ cols2.T).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c_in, k, k, n, ho, wo)
            gxp = np.zeros((n, c_in, h + 2 * p, w + 2 * p), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
            gx = gx[0] if squeeze else gx
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_node("conv2d", out, parents, back)


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; ties go to the row-major first element."""
    xd, squeeze = _batched(x, "maxpool2d")
    n, c, h, w = xd.shape
    if window < 1 or h % window or w % window:
        raise ShapeError("maxpool2d", f"extent {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = xd.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, window * window)
    arg = blocks.argmax(axis=-1)  # argmax returns the first maximal index
    note_branch(arg)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def back(g):
        g4 = g[None] if squeeze else g
        gb = np.zeros((n, c, ho, wo, window * window), dtype=xd.dtype)
        np.put_along_axis(gb, arg[..., None], g4[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5)
        gx = gb.reshape(n, c, h, w)
        return (gx[0] if squeeze else gx,)

    return make_node("maxpool2d", out, (x,), back)


def upsample2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    if factor < 1:
        raise ShapeError("upsample2d", f"factor must be >= 1, got {factor}")
    _batched(x, "upsample2d")
    if factor == 1:
        return make_node("upsample2d", x.data.copy(), (x,), lambda g: (g,))
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)
    h, w = x.shape[-2:]

    def back(g):
        lead = g.shape[:-2]
        return (g.reshape(*lead, h, factor, w, factor).sum(axis=(-3, -1)),)

    return make_node("upsample2d", out, (x,), back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeError("concat_channels", f"incompatible ranks {a.shape} and {b.shape}")
    if a.shape[-2:] != b.shape[-2:]:
        raise ShapeError("concat_channels", f"spatial mismatch {a.shape[-2:]} vs {b.shape[-2:]}")
    if a.ndim == 4 and a.shape[0] != b.shape[0]:
        raise ShapeError("concat_channels", f"batch mismatch {a.shape[0]} vs {b.shape[0]}")
    return concat([a, b], axis=-3)
