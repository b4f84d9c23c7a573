"""Finite-difference check of the whole pipeline on a tiny configuration."""

from __future__ import annotations

from dataclasses import dataclass

from ..decoder import ce_dice_loss
from ..fewshot.config import TrainConfig
from ..fewshot.episode import Episode, build_episode
from ..fewshot.model import forward_episode, init_model
from ..numerics import GradCheckReport, grad_check
from .phantoms import PhantomSpec, generate_phantoms

# Several GRU weight gradients are around 1e-8 while the loss is O(1), so the
# roundoff of a central difference (about 1e-16 / eps) needs eps well above
# 1e-6.  Steps that cross a relu or max-pool branch are shrunk per entry by
# grad_check itself.
PIPELINE_EPS = 3e-4

GROUPS = ("enc_s", "enc_q", "gru_f", "gru_b", "dec")


@dataclass
class PipelineCheck:
    report: GradCheckReport
    config: TrainConfig

    def group_errors(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for p in self.report.params:
            group = p.name.split(".", 1)[0]
            out[group] = max(out.get(group, 0.0), p.max_rel_error)
        return out

    @property
    def passed(self) -> bool:
        return self.report.passed


def tiny_episode(size: int, n_a: int, K: int, seed: int = 0) -> Episode:
    spec = PhantomSpec(family="ellipsoid", radius_range=(3.0, 6.0), dims=(2 * n_a + 6, size, size),
                       count=K + 1, seed=seed, noise_std=0.2)
    cases = generate_phantoms(spec)
    query, supports = cases[0], cases[1:]
    r = query.organ_range(spec.label)
    return build_episode(query, supports, spec.label, (r.start_slice + r.end_slice) // 2, n_a, r)


def pipeline_gradcheck(size: int = 16, n_a: int = 1, K: int = 1, widths=(4, 8), seed: int = 0,
                       eps: float = PIPELINE_EPS, tolerance: float = 1e-4, max_entries: int | None = None,
                       ablation: bool = False) -> PipelineCheck:
    """Check every parameter of encoders, both GRUs and the decoder in 64-bit."""
    config = TrainConfig(K=K, n_a=n_a, slice_size=size, widths=tuple(widths), precision=64,
                         seed=seed, ablation_disable_gru=ablation)
    params = init_model(config)
    episode = tiny_episode(size, n_a, K, seed)

    def loss_fn(p):
        out = forward_episode(episode, p, ablation)
        return ce_dice_loss(out.logits, episode.query_label)

    report = grad_check(loss_fn, params, eps=eps, tolerance=tolerance, max_entries=max_entries,
                        seed=seed)
    return PipelineCheck(report, config)
