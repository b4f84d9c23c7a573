from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..numerics import AdamState, Tensor
from ..params import Params
from .config import TrainConfig

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Parameter snapshot plus optimizer state and the config that produced it.

    Arrays are never modified in place by this package, so sharing them
    between checkpoints is safe.
    """

    params: dict[str, np.ndarray]
    optimizer: AdamState
    config: TrainConfig
    iteration: int = 0
    history: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_params(cls, params: Params, optimizer: AdamState, config: TrainConfig,
                    iteration: int = 0, history=None, meta=None) -> "Checkpoint":
        return cls({k: v.data for k, v in params.items()}, optimizer, config, iteration,
                   list(history or []), dict(meta or {}))

    def tensors(self, requires_grad: bool = False) -> Params:
        """Fresh leaf tensors over the stored arrays."""
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.params.items()}, self.optimizer.copy(),
                          self.config.replace(), self.iteration, list(self.history),
                          dict(self.meta), self.version)
