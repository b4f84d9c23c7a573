"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad, record_branches


class NonDeterministicLossError(RuntimeError):
    pass


@dataclass
class ParamCheck:
    name: str
    checked: int
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    reduced_steps: int = 0


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def violations(self) -> list[ParamCheck]:
        return [p for p in self.params if not p.max_rel_error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.violations

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def by_name(self) -> dict[str, float]:
        return {p.name: p.max_rel_error for p in self.params}


def relative_error(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def tape_gradients(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                   params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.zero_grad()
        p.requires_grad = True
    loss = loss_fn(params)
    loss.backward()
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def grad_check(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, Tensor],
               eps: float = 1e-6,
               tolerance: float = 1e-4,
               max_entries: int | None = None,
               seed: int = 0,
               grad_fn: Callable[[Mapping[str, Tensor]], Mapping[str, np.ndarray]] | None = None,
               floor: float = 1e-8,
               max_step_reductions: int = 3) -> GradCheckReport:
    """Compare tape gradients with ``(f(x+eps) - f(x-eps)) / (2 eps)``.

    ``max_entries`` caps how many coordinates of each parameter are probed
    (chosen at random with ``seed``); ``None`` probes all of them.
    ``grad_fn`` replaces the tape when supplied, which is how the checker
    itself is tested against deliberately wrong gradients.

    A difference is only meaningful on one smooth piece of the loss.  When
    either perturbed point takes a different relu or max-pool branch than
    the unperturbed one, the step for that entry is divided by 10, at most
    ``max_step_reductions`` times.  The choice never looks at the analytic
    gradient.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check requires 64-bit parameters; {name!r} is {p.dtype}")

    analytic = dict(grad_fn(params)) if grad_fn else tape_gradients(loss_fn, params)

    def f() -> tuple[float, bytes]:
        with no_grad(), record_branches() as branches:
            value = float(loss_fn(params).data)
        return value, branches.digest()

    base, base_branches = f()
    if f()[0] != base:
        raise NonDeterministicLossError("loss_fn returned different values for identical inputs")

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        original = p.data
        size = original.size
        if max_entries is None or max_entries >= size:
            flat_idx = np.arange(size)
        else:
            flat_idx = np.sort(rng.choice(size, size=max_entries, replace=False))
        numeric = np.empty(len(flat_idx))
        reduced = 0
        try:
            for n, i in enumerate(flat_idx):
                x = original.flat[i]
                step = eps
                for attempt in range(max_step_reductions + 1):
                    # difference over the representable points, not the nominal step
                    hi, lo = x + step, x - step
                    work = original.copy()
                    work.flat[i] = hi
                    p.data = work
                    up, up_branches = f()
                    work.flat[i] = lo
                    down, down_branches = f()
                    if up_branches == base_branches == down_branches:
                        break
                    if attempt < max_step_reductions:
                        step /= 10
                reduced += step != eps
                numeric[n] = (up - down) / (hi - lo)
        finally:
            p.data = original
        exact = analytic[name].ravel()[flat_idx]
        errs = relative_error(exact, numeric, floor)
        worst = int(np.argmax(errs))
        report.params.append(ParamCheck(
            name=name,
            checked=len(flat_idx),
            max_rel_error=float(errs[worst]),
            worst_index=tuple(int(v) for v in np.unravel_index(flat_idx[worst], original.shape)),
            analytic=float(exact[worst]),
            numeric=float(numeric[worst]),
            reduced_steps=reduced,
        ))
    return report
