"""Episode assembly and sampling."""

from __future__ import annotations

import hashlib
from functools import cached_property
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..volume import (
    LabelVolume,
    OrganRange,
    Volume,
    organ_range,
    sample_transform,
    support_slice,
    window_indices,
)


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class Case:
    """One dataset entry: an image volume and its label volume."""

    case_id: str
    volume: Volume
    labels: LabelVolume

    @cached_property
    def _organs(self) -> tuple[int, ...]:
        return tuple(self.labels.organs())

    def organs(self) -> list[int]:
        return list(self._organs)

    def organ_range(self, organ_id: int) -> OrganRange:
        return organ_range(self.labels, organ_id)

    @cached_property
    def _digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.volume.voxels).tobytes())
        h.update(np.ascontiguousarray(self.labels.labels).tobytes())
        return h.hexdigest()

    def digest(self) -> str:
        return self._digest


@dataclass
class SupportEntry:
    images: np.ndarray  # [2 n_a + 1, H, W]
    labels: np.ndarray  # same shape, binary uint8
    organ_id: int
    case_id: str = ""
    slice_indices: tuple[int, ...] = ()

    @property
    def key(self) -> bytes:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.digest()


@dataclass
class Episode:
    supports: list[SupportEntry]
    query_images: np.ndarray  # [2 n_a + 1, H, W]
    organ_id: int
    query_label: np.ndarray | None = None  # centre slice, binary
    query_case: str = ""
    query_center: int = -1
    query_slices: tuple[int, ...] = ()
    valid_mask: np.ndarray | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.supports)

    @property
    def n_a(self) -> int:
        return self.query_images.shape[0] // 2

    def validate(self) -> None:
        shape = self.query_images.shape
        if shape[0] % 2 != 1:
            raise ValueError(f"query window must have odd length, got {shape[0]}")
        if not self.supports:
            raise ValueError("episode needs at least one support entry")
        for s in self.supports:
            if s.images.shape != shape or s.labels.shape != shape:
                raise ValueError(f"support window {s.images.shape} does not match query {shape}")
        if self.query_label is not None and self.query_label.shape != shape[1:]:
            raise ValueError(f"query label {self.query_label.shape} does not match slices {shape[1:]}")


def support_window(case: Case, organ_id: int, query_slices: Sequence[int],
                   query_range: OrganRange) -> SupportEntry:
    """Support slices corresponding to each query slice of a window."""
    s_range = case.organ_range(organ_id)
    idx = [support_slice(q, query_range, s_range) for q in query_slices]
    images = case.volume.voxels[idx]
    labels = (case.labels.labels[idx] == organ_id).astype(np.uint8)
    return SupportEntry(images, labels, organ_id, case.case_id, tuple(idx))


def build_episode(query: Case | Volume, supports: Sequence[Case], organ_id: int, t0: int,
                  n_a: int, query_range: OrganRange | None = None,
                  with_label: bool = True) -> Episode:
    """Episode for predicting slice ``t0`` of ``query`` (absolute index)."""
    vol = query.volume if isinstance(query, Case) else query
    if query_range is None:
        if not isinstance(query, Case):
            raise ValueError("query_range is required when the query has no labels")
        query_range = query.organ_range(organ_id)
    idx, valid = window_indices(vol.dims[0], t0, n_a)
    label = None
    if with_label and isinstance(query, Case):
        label = (query.labels.labels[t0] == organ_id).astype(np.uint8)
    ep = Episode(
        supports=[support_window(c, organ_id, idx, query_range) for c in supports],
        query_images=vol.voxels[idx],
        organ_id=organ_id,
        query_label=label,
        query_case=query.case_id if isinstance(query, Case) else "",
        query_center=t0,
        query_slices=tuple(idx),
        valid_mask=valid,
    )
    ep.validate()
    return ep


def eligible_organs(dataset: Sequence[Case], exclude_organ: int | None, need: int) -> dict[int, list[int]]:
    """Organ id -> indices of cases carrying it, for organs present in >= ``need`` cases."""
    by_organ: dict[int, list[int]] = {}
    for i, case in enumerate(dataset):
        for organ in case.organs():
            if organ != exclude_organ:
                by_organ.setdefault(organ, []).append(i)
    return {o: idx for o, idx in sorted(by_organ.items()) if len(idx) >= need}


def sample_episode(dataset: Sequence[Case], exclude_organ: int | None, K: int, n_a: int,
                   rng_seed) -> Episode:
    """Random training episode for an organ other than ``exclude_organ``.

    Query and supports are distinct cases; the query centre slice is drawn
    uniformly from the query organ range.
    """
    rng = np.random.default_rng(rng_seed)
    organs = eligible_organs(dataset, exclude_organ, K + 1)
    if not organs:
        raise InsufficientDataError(
            f"no organ other than {exclude_organ} appears in at least {K + 1} cases")
    organ = int(rng.choice(list(organs)))
    chosen = rng.choice(organs[organ], size=K + 1, replace=False)
    query = dataset[int(chosen[0])]
    supports = [dataset[int(i)] for i in chosen[1:]]
    q_range = query.organ_range(organ)
    t0 = int(rng.integers(q_range.start_slice, q_range.end_slice + 1))
    ep = build_episode(query, supports, organ, t0, n_a, q_range)
    ep.seed = rng_seed if isinstance(rng_seed, int) else None
    return ep


def augment_episode(episode: Episode, rng_seed, arbitrary_angle: bool = False) -> Episode:
    """Apply one random flip/rotation to every slice and label of the episode.

    A single transform keeps support and query geometrically aligned.
    """
    rng = np.random.default_rng(rng_seed)
    square = episode.query_images.shape[-1] == episode.query_images.shape[-2]
    tf = sample_transform(rng, square, arbitrary_angle)
    if tf.is_identity:
        return episode
    supports = [
        replace(s, images=tf.apply(s.images), labels=tf.apply(s.labels, is_label=True))
        for s in episode.supports
    ]
    label = None if episode.query_label is None else tf.apply(episode.query_label, is_label=True)
    return replace(episode, supports=supports, query_images=tf.apply(episode.query_images),
                   query_label=label, meta={**episode.meta, "transform": tf})
