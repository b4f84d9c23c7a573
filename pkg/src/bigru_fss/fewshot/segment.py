"""Whole-volume inference by sliding the slice window over the organ range."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..decoder import decode
from ..encoder import encode_query, encode_support
from ..numerics import Tensor, no_grad
from ..params import Params
from ..volume import LabelVolume, OrganRange, Volume, support_slice, window_indices
from .checkpoint import Checkpoint
from .episode import Case
from .model import center_features

_CHUNK = 32


def _encode_query_slices(voxels: np.ndarray, indices: list[int], params: Params):
    bottleneck, skips = {}, {}
    for lo in range(0, len(indices), _CHUNK):
        chunk = indices[lo:lo + _CHUNK]
        b, s = encode_query(voxels[chunk], params)
        for n, i in enumerate(chunk):
            bottleneck[i] = b.data[n]
            skips[i] = [m.data[n] for m in s]
    return bottleneck, skips


def _encode_support_slices(case: Case, organ_id: int, indices: list[int], params: Params):
    out = {}
    for lo in range(0, len(indices), _CHUNK):
        chunk = indices[lo:lo + _CHUNK]
        labels = (case.labels.labels[chunk] == organ_id).astype(np.uint8)
        b = encode_support(case.volume.voxels[chunk], labels, params)
        for n, i in enumerate(chunk):
            out[i] = b.data[n]
    return out


def segment_volume(checkpoint: Checkpoint, support_set: Sequence[Case], query_volume: Volume,
                   query_organ_range: OrganRange, organ_id: int | None = None) -> LabelVolume:
    """Predict every slice in ``query_organ_range``; slices outside it are background.

    Support order does not matter: supports are put in a canonical order
    before any arithmetic happens.
    """
    if not support_set:
        raise ValueError("segment_volume needs at least one support case")
    if len(query_organ_range) < 1:
        raise ValueError("empty query organ range")
    n_slices = query_volume.dims[0]
    if query_organ_range.end_slice >= n_slices:
        raise ValueError(f"organ range {query_organ_range} exceeds {n_slices} slices")
    if organ_id is None:
        organ_id = support_set[0].labels.organ_id
    config = checkpoint.config
    n_a = config.n_a
    params = checkpoint.tensors()
    supports = sorted(support_set, key=lambda c: c.digest())
    ranges = [c.organ_range(organ_id) for c in supports]

    windows = {t: window_indices(n_slices, t, n_a)[0] for t in query_organ_range}
    needed_q = sorted({i for idx in windows.values() for i in idx})
    mapping = [{q: support_slice(q, query_organ_range, r) for q in needed_q} for r in ranges]

    out = np.zeros(query_volume.dims, dtype=np.uint8)
    with no_grad():
        q_bottleneck, q_skips = _encode_query_slices(query_volume.voxels, needed_q, params)
        s_bottleneck = [
            _encode_support_slices(case, organ_id, sorted(set(m.values())), params)
            for case, m in zip(supports, mapping)
        ]
        for t, idx in windows.items():
            sb = np.stack([[s_bottleneck[k][mapping[k][q]] for q in idx] for k in range(len(supports))])
            qb = np.stack([q_bottleneck[q] for q in idx])
            feat = center_features(Tensor(sb), Tensor(qb), params, config.ablation_disable_gru)
            seg = decode(feat, [Tensor(s) for s in q_skips[t]], params)
            out[t] = seg.mask * organ_id
    return LabelVolume(out, organ_id)
