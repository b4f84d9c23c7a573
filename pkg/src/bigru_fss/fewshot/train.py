"""Episodic meta-training."""

from __future__ import annotations

import logging
import time
from typing import Callable, Sequence

import numpy as np

from ..decoder import ce_dice_loss
from ..numerics import AdamState, NonFiniteError, adam_step
from ..params import Params
from .checkpoint import Checkpoint
from .config import TrainConfig
from .episode import Case, Episode, augment_episode, sample_episode
from .model import forward_episode, init_model

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, episode_seed: int, cause: Exception | None = None):
        super().__init__(f"non-finite loss at iteration {iteration} "
                         f"(episode seed {episode_seed}): {cause}")
        self.iteration = iteration
        self.episode_seed = episode_seed


def episode_seed(seed: int, iteration: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([int(seed), int(stream), int(iteration)]).generate_state(1)[0])


def loss_and_grads(episode: Episode, params: Params, ablation: bool) -> tuple[float, dict[str, np.ndarray]]:
    for p in params.values():
        p.zero_grad()
        p.requires_grad = True
    out = forward_episode(episode, params, ablation)
    loss = ce_dice_loss(out.logits, episode.query_label)
    loss.backward()
    grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
    return float(loss.data), grads


def initial_checkpoint(config: TrainConfig) -> Checkpoint:
    params = init_model(config)
    return Checkpoint.from_params(params, AdamState.for_params(params), config)


def train(config: TrainConfig, dataset: Sequence[Case],
          on_step: Callable[[int, float], None] | None = None,
          start: Checkpoint | None = None) -> Checkpoint:
    """Sample, augment, forward, loss, Adam step; repeated ``config.iterations`` times.

    Training resumes from ``start`` when given (its iteration count offsets
    the episode seeds so a resumed run replays the uninterrupted one).
    """
    ckpt = start or initial_checkpoint(config)
    params = ckpt.tensors(requires_grad=True)
    state = ckpt.optimizer
    history = list(ckpt.history)
    exclude = config.target_organ_id or None
    first = ckpt.iteration
    fixed: Episode | None = None
    if config.fixed_episode:
        fixed = sample_episode(dataset, exclude, config.K, config.n_a, episode_seed(config.seed, 0))

    tick = time.perf_counter()
    for it in range(first, first + config.iterations):
        seed = episode_seed(config.seed, it)
        ep = fixed if fixed is not None else sample_episode(dataset, exclude, config.K, config.n_a, seed)
        if config.augment_train:
            ep = augment_episode(ep, episode_seed(config.seed, it, stream=1), config.arbitrary_rotation)
        try:
            loss, grads = loss_and_grads(ep, params, config.ablation_disable_gru)
        except NonFiniteError as exc:
            raise TrainingDivergedError(it, seed, exc) from exc
        if not np.isfinite(loss):
            raise TrainingDivergedError(it, seed)
        params, state = adam_step(params, grads, state, config.learning_rate)
        history.append(loss)
        if on_step is not None:
            on_step(it, loss)
        if config.log_every and (it + 1) % config.log_every == 0:
            recent = history[-config.log_every:]
            logger.info("iter %d  loss %.4f  (%.2fs/iter)", it + 1, float(np.mean(recent)),
                        (time.perf_counter() - tick) / len(recent))
            tick = time.perf_counter()

    return Checkpoint.from_params(params, state, config, first + config.iterations, history,
                                  ckpt.meta)
