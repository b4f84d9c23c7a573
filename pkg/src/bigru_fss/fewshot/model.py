"""Full network: encoders, bidirectional GRU, K-shot sum and decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..bigru import BACKWARD, FORWARD, GruParams, bidirectional, init_bigru, kshot_sum
from ..decoder import SegmentationOutput, decode, init_decoder
from ..encoder import encode_query, encode_support, fuse, init_encoders
from ..numerics import Tensor, concat_channels, dtype_for, getitem, reshape, stack
from ..params import Params
from .config import TrainConfig
from .episode import Episode


def init_model(config: TrainConfig) -> Params:
    """He-initialised parameters for ``config`` (biases start at zero)."""
    dtype = dtype_for(config.precision)
    bottleneck = config.widths[-1]
    params = init_encoders(config.widths, config.seed, dtype)
    if config.ablation_disable_gru:
        dec_in = 2 * bottleneck
    else:
        params.update(init_bigru(2 * bottleneck, config.hidden, config.seed, dtype))
        dec_in = 2 * config.hidden
    params.update(init_decoder(dec_in, config.widths, config.seed, dtype))
    return params


def uses_gru(params: Params) -> bool:
    return f"{FORWARD}.conv_z.weight" in params


@dataclass
class EpisodeFeatures:
    summed: Tensor  # K-shot summed features at the window centre, [C, h, w]
    skips: list[Tensor]  # query skip maps of the centre slice


def center_features(support_bottleneck: Tensor, query_bottleneck: Tensor, params: Params,
                    ablation_disable_gru: bool = False) -> Tensor:
    """K-shot summed features at the centre position of the window.

    ``support_bottleneck`` is ``[K, W, C, h, w]`` and ``query_bottleneck``
    ``[W, C, h, w]`` with ``W = 2 n_a + 1``.  Each support runs its own
    bidirectional sweep (batched along K); the K outputs are then summed.
    """
    K, W = support_bottleneck.shape[:2]
    c = W // 2
    if ablation_disable_gru:
        per_k = [[fuse(getitem(support_bottleneck, (k, c)), getitem(query_bottleneck, c))]
                 for k in range(K)]
        return kshot_sum(per_k)[0]
    if not uses_gru(params):
        raise KeyError("parameters have no GRU weights; was the model built as an ablation?")
    xs = []
    for t in range(W):
        s_t = getitem(support_bottleneck, (slice(None), t))
        q_t = getitem(query_bottleneck, t)
        q_rep = stack([q_t] * K) if K > 1 else reshape(q_t, (1,) + q_t.shape)
        xs.append(concat_channels(s_t, q_rep))
    out = bidirectional(xs, GruParams.from_params(params, FORWARD),
                        GruParams.from_params(params, BACKWARD))
    per_k = [[getitem(out[c], k)] for k in range(K)]
    return kshot_sum(per_k)[0]


def episode_features(episode: Episode, params: Params,
                     ablation_disable_gru: bool = False) -> EpisodeFeatures:
    episode.validate()
    supports = sorted(episode.supports, key=lambda s: s.key)
    K, W = len(supports), episode.query_images.shape[0]
    # without the GRU only the centre slice of each window is ever used
    window = slice(W // 2, W // 2 + 1) if ablation_disable_gru else slice(None)
    imgs = np.concatenate([s.images[window] for s in supports])
    lbls = np.concatenate([s.labels[window] for s in supports])
    s_feat = encode_support(imgs, lbls, params)
    s_feat = reshape(s_feat, (K, -1) + s_feat.shape[1:])
    q_feat, skips = encode_query(episode.query_images[window], params)
    summed = center_features(s_feat, q_feat, params, ablation_disable_gru)
    c = q_feat.shape[0] // 2
    return EpisodeFeatures(summed, [getitem(s, c) for s in skips])


def forward_episode(episode: Episode, params: Params,
                    ablation_disable_gru: bool = False) -> SegmentationOutput:
    """Logits for the centre query slice of ``episode``."""
    feats = episode_features(episode, params, ablation_disable_gru)
    return decode(feats.summed, feats.skips, params)
