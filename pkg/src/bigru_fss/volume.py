"""Volumes, label masks, slice windows and slice correspondence.

Slices are stacked along axis 0, so a volume array is ``[T, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.voxels.ndim != 3 or 0 in self.voxels.shape:
            raise ValueError(f"volume must be a non-empty 3D array, got shape {self.voxels.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelVolume:
    labels: np.ndarray
    organ_id: int = 1

    def __post_init__(self):
        if self.labels.ndim != 3 or 0 in self.labels.shape:
            raise ValueError(f"label volume must be a non-empty 3D array, got {self.labels.shape}")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def mask(self, organ_id: int | None = None) -> np.ndarray:
        """Binary {0,1} uint8 mask of ``organ_id`` (default: this volume's organ)."""
        oid = self.organ_id if organ_id is None else organ_id
        return (self.labels == oid).astype(np.uint8)

    def organs(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels) if v != 0]


@dataclass(frozen=True)
class OrganRange:
    start_slice: int
    end_slice: int

    def __post_init__(self):
        if self.start_slice < 0 or self.end_slice < self.start_slice:
            raise ValueError(f"invalid organ range ({self.start_slice}, {self.end_slice})")

    def __len__(self) -> int:
        return self.end_slice - self.start_slice + 1

    def __iter__(self):
        return iter(range(self.start_slice, self.end_slice + 1))


@dataclass(frozen=True)
class SliceWindow:
    center_index: int
    half_width: int
    slices: np.ndarray
    valid_mask: np.ndarray
    indices: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return self.slices.shape[0]


def normalize(volume: Volume) -> Volume:
    """Linear min-max rescale to [0, 1]."""
    v = volume.voxels.astype(np.float64)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        raise ValueError("cannot normalize a constant volume")
    out = ((v - lo) / (hi - lo)).astype(np.float32)
    return Volume(out, volume.spacing)


def _bilinear_axis(n_in: int, n_out: int, scale: float):
    # half-pixel centres, edge clamped
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    r0, r1, fr = _bilinear_axis(h, out_h, h / out_h)
    c0, c1, fc = _bilinear_axis(w, out_w, w / out_w)
    img = img.astype(np.float64)
    rows = img[r0] * (1 - fr)[:, None] + img[r1] * fr[:, None]
    return rows[:, c0] * (1 - fc)[None, :] + rows[:, c1] * fc[None, :]


def crop_resize(slice2d: np.ndarray, roi_box: tuple[int, int, int], out_size: int) -> np.ndarray:
    """Crop the square ``(row, col, size)`` box and resize bilinearly to ``out_size``."""
    row, col, size = roi_box
    h, w = slice2d.shape
    if size < 1 or row < 0 or col < 0 or row + size > h or col + size > w:
        raise ValueError(f"roi {roi_box} outside slice of shape {slice2d.shape}")
    if out_size < 1:
        raise ValueError(f"out_size must be positive, got {out_size}")
    crop = slice2d[row:row + size, col:col + size]
    if size == out_size:
        return crop.astype(np.float64)
    return resize_bilinear(crop, out_size, out_size)


def organ_range(labels: LabelVolume, organ_id: int | None = None) -> OrganRange:
    oid = labels.organ_id if organ_id is None else organ_id
    present = np.flatnonzero((labels.labels == oid).any(axis=(1, 2)))
    if present.size == 0:
        raise ValueError(f"organ {oid} has no foreground voxels")
    return OrganRange(int(present[0]), int(present[-1]))


def support_index(t: int, T: int, T_hat: int) -> int:
    """Support slice matching query slice ``t`` of ``T`` (1-based, range-relative).

    ``round(t / T * T_hat)`` with halves rounded up, computed in integers,
    then clamped to ``[1, T_hat]``.
    """
    if T < 1 or T_hat < 1:
        raise ValueError(f"T and T_hat must be >= 1, got {T}, {T_hat}")
    if not 1 <= t <= T:
        raise ValueError(f"t={t} outside [1, {T}]")
    u = (2 * t * T_hat + T) // (2 * T)
    return min(max(u, 1), T_hat)


def support_slice(query_slice: int, query_range: OrganRange, support_range: OrganRange) -> int:
    """Absolute support slice index for an absolute query slice index.

    Query slices outside the query organ range are clamped onto it first,
    so the result always lies inside the support organ range.
    """
    T = len(query_range)
    t = min(max(query_slice - query_range.start_slice + 1, 1), T)
    return support_range.start_slice + support_index(t, T, len(support_range)) - 1


def window_indices(n_slices: int, t0: int, n_a: int) -> tuple[list[int], np.ndarray]:
    raw = np.arange(t0 - n_a, t0 + n_a + 1)
    clamped = np.clip(raw, 0, n_slices - 1)
    return [int(i) for i in clamped], raw == clamped


def window(volume: Volume | np.ndarray, t0: int, n_a: int) -> SliceWindow:
    """The ``2 n_a + 1`` slices centred on ``t0``; edge slices are replicated."""
    vox = volume.voxels if isinstance(volume, Volume) else volume
    if not 0 <= t0 < vox.shape[0]:
        raise ValueError(f"t0={t0} outside volume with {vox.shape[0]} slices")
    if n_a < 0:
        raise ValueError(f"n_a must be >= 0, got {n_a}")
    idx, valid = window_indices(vox.shape[0], t0, n_a)
    return SliceWindow(t0, n_a, vox[idx], valid, tuple(idx))


@dataclass(frozen=True)
class Transform:
    """Flips followed by ``k_rot`` counter-clockwise quarter turns."""

    hflip: bool = False
    vflip: bool = False
    k_rot: int = 0
    angle: float = 0.0

    @property
    def is_identity(self) -> bool:
        return not (self.hflip or self.vflip or self.k_rot % 4 or self.angle)

    def apply(self, arr: np.ndarray, is_label: bool = False) -> np.ndarray:
        out = arr
        if self.hflip:
            out = out[..., :, ::-1]
        if self.vflip:
            out = out[..., ::-1, :]
        if self.k_rot % 4:
            out = np.rot90(out, self.k_rot, axes=(-2, -1))
        if self.angle:
            from scipy.ndimage import rotate

            out = rotate(out, self.angle, axes=(-1, -2), reshape=False,
                         order=0 if is_label else 1, mode="nearest")
        return np.ascontiguousarray(out)


def sample_transform(rng: np.random.Generator, square: bool = True,
                     arbitrary_angle: bool = False) -> Transform:
    hflip = bool(rng.integers(2))
    vflip = bool(rng.integers(2))
    k_rot = int(rng.integers(4)) if square else 2 * int(rng.integers(2))
    angle = float(rng.uniform(-180.0, 180.0)) if arbitrary_angle else 0.0
    return Transform(hflip, vflip, k_rot, angle)


def augment(image_slices: np.ndarray, label_slices: np.ndarray, rng_seed,
            arbitrary_angle: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random flip/rotation identically to every image and label slice."""
    if image_slices.shape != label_slices.shape:
        raise ValueError(f"image {image_slices.shape} and label {label_slices.shape} differ")
    rng = np.random.default_rng(rng_seed)
    square = image_slices.shape[-1] == image_slices.shape[-2]
    tf = sample_transform(rng, square, arbitrary_angle)
    return tf.apply(image_slices), tf.apply(label_slices, is_label=True)
