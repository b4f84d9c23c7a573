from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.name = name


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            second_moment={k: np.zeros_like(p.data) for k, p in params.items()},
            **hyper,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            {k: v.copy() for k, v in self.first_moment.items()},
            {k: v.copy() for k, v in self.second_moment.items()},
            self.step_count, self.beta1, self.beta2, self.epsilon,
        )


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update.

    Returns fresh parameter tensors and a fresh state; the inputs are left
    untouched so earlier snapshots stay valid.  All gradients are validated
    before anything is updated.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(name)

    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    new_params: dict[str, Tensor] = {}
    m_new: dict[str, np.ndarray] = {}
    v_new: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype.type
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        m_hat = m / dt(corr1)
        v_hat = v / dt(corr2)
        data = p.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
        new_params[name] = Tensor(data, requires_grad=p.requires_grad)
        m_new[name] = m
        v_new[name] = v
    return new_params, AdamState(m_new, v_new, t, b1, b2, eps)
