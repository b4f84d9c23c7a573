"""Test-time adaptation on the K support cases.

Each step holds one support case out as a temporary query and uses the
other K-1 as supports.  Held-out choices cycle round-robin by default.
Every ``adapt_eval_every`` steps the mean held-out loss over all K splits
(fixed slices, no augmentation) is measured; the best parameters seen so
far are kept and the run stops after ``adapt_patience`` evaluations
without improvement.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from ..decoder import ce_dice_loss
from ..numerics import AdamState, adam_step, no_grad
from ..params import Params
from .checkpoint import Checkpoint
from .config import TrainConfig
from .episode import Case, augment_episode, build_episode
from .model import forward_episode
from .train import episode_seed, loss_and_grads

logger = logging.getLogger(__name__)

_ADAPT_STREAM = 7


class AdaptationError(ValueError):
    pass


def adaptation_splits(K: int, iterations: int, random: bool = False,
                      seed: int = 0) -> list[tuple[int, tuple[int, ...]]]:
    """(held-out index, support indices) for each adaptation step."""
    if K < 2:
        raise AdaptationError(f"adaptation needs K >= 2 support cases (one is held out), got K={K}")
    rng = np.random.default_rng(seed)
    out = []
    for it in range(iterations):
        held = int(rng.integers(K)) if random else it % K
        out.append((held, tuple(i for i in range(K) if i != held)))
    return out


def _eval_slices(case: Case, organ_id: int, count: int) -> list[int]:
    r = case.organ_range(organ_id)
    return sorted({int(round(v)) for v in np.linspace(r.start_slice, r.end_slice, count + 2)[1:-1]})


def split_loss(params: Params, support_set: Sequence[Case], organ_id: int, config: TrainConfig) -> float:
    """Mean held-out loss over all K leave-one-out splits."""
    losses = []
    K = len(support_set)
    with no_grad():
        for held in range(K):
            query = support_set[held]
            others = [support_set[i] for i in range(K) if i != held]
            for t0 in _eval_slices(query, organ_id, config.adapt_eval_slices):
                ep = build_episode(query, others, organ_id, t0, config.n_a)
                out = forward_episode(ep, params, config.ablation_disable_gru)
                losses.append(float(ce_dice_loss(out.logits, ep.query_label).data))
    return float(np.mean(losses))


def adapt(checkpoint: Checkpoint, support_set: Sequence[Case], adapt_config: TrainConfig | None = None,
          organ_id: int | None = None, seed: int = 0) -> Checkpoint:
    """Fine-tune a copy of ``checkpoint`` on ``support_set``; the input is left untouched."""
    config = adapt_config or checkpoint.config
    K = len(support_set)
    if K < 2:
        raise AdaptationError(f"adaptation needs K >= 2 support cases (one is held out), got K={K}")
    if organ_id is None:
        organ_id = support_set[0].labels.organ_id
    if config.adapt_iterations == 0:
        return checkpoint.copy()

    support_set = sorted(support_set, key=lambda c: c.digest())
    params = checkpoint.tensors(requires_grad=True)
    state = AdamState.for_params(params)
    splits = adaptation_splits(K, config.adapt_iterations, config.adapt_random_splits, seed)

    best_params = checkpoint.params
    best = split_loss(params, support_set, organ_id, config)
    initial = best
    stale = 0
    history = []
    steps = 0
    for it, (held, others) in enumerate(splits):
        query = support_set[held]
        rng = np.random.default_rng(episode_seed(seed, it, _ADAPT_STREAM))
        r = query.organ_range(organ_id)
        t0 = int(rng.integers(r.start_slice, r.end_slice + 1))
        ep = build_episode(query, [support_set[i] for i in others], organ_id, t0, config.n_a, r)
        if config.augment_adapt:
            ep = augment_episode(ep, episode_seed(seed, it, _ADAPT_STREAM + 1), config.arbitrary_rotation)
        loss, grads = loss_and_grads(ep, params, config.ablation_disable_gru)
        params, state = adam_step(params, grads, state, config.adapt_lr)
        history.append(loss)
        steps = it + 1
        if config.adapt_eval_every and steps % config.adapt_eval_every == 0:
            current = split_loss(params, support_set, organ_id, config)
            logger.info("adapt step %d  split loss %.4f (best %.4f)", steps, current, best)
            if current < best:
                best, best_params, stale = current, {k: p.data for k, p in params.items()}, 0
            else:
                stale += 1
                if config.adapt_patience and stale >= config.adapt_patience:
                    break

    out = checkpoint.copy()
    out.params = {k: np.array(v, copy=True) for k, v in best_params.items()}
    out.meta = {**checkpoint.meta, "adapt_steps": steps, "adapt_split_loss_before": initial,
                "adapt_split_loss_after": best}
    out.history = list(checkpoint.history)
    return out
