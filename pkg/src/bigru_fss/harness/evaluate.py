"""Multi-trial few-shot evaluation."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..decoder import dice_score
from ..fewshot.adapt import adapt
from ..fewshot.checkpoint import Checkpoint
from ..fewshot.config import TrainConfig
from ..fewshot.episode import Case, InsufficientDataError
from ..fewshot.segment import segment_volume

THREADS_ENV = "BIGRU_FSS_THREADS"


@dataclass
class EvalReport:
    """Dice summary; ``per_query`` averages each query over its trials.

    ``std`` is the sample standard deviation (n - 1 denominator) of
    ``per_query``; it is 0.0 for a single query.
    """

    per_query: list[float]
    mean: float
    std: float
    trials: int
    K: int
    seeds: list[int]
    query_ids: list[str] = field(default_factory=list)
    trial_scores: list[list[float]] = field(default_factory=list)
    adapted: bool = False

    @classmethod
    def from_scores(cls, trial_scores: Sequence[Sequence[float]], K: int, seeds: Sequence[int],
                    query_ids: Sequence[str] = (), adapted: bool = False) -> "EvalReport":
        per_query = [float(np.mean(s)) for s in trial_scores]
        mean, std = summarize(per_query)
        return cls(per_query, mean, std, len(trial_scores[0]) if trial_scores else 0, K,
                   list(seeds), list(query_ids), [list(map(float, s)) for s in trial_scores], adapted)

    def to_record(self) -> dict:
        return {"event": "eval", **asdict(self)}


def summarize(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no scores to summarize")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def cases_with_organ(dataset: Sequence[Case], organ_id: int) -> list[Case]:
    return [c for c in dataset if organ_id in c.organs()]


def support_sets(queries: Sequence[Case], pool: Sequence[Case], K: int, trials: int, seed: int,
                 shared: bool) -> list[list[list[Case]]]:
    """``[query][trial] -> K support cases``, never containing the query itself.

    With ``shared`` the draw depends only on the trial, so every query sees
    the same support set in a given trial.
    """
    out = []
    for qi, query in enumerate(queries):
        rows = []
        candidates = [c for c in pool if c.case_id != query.case_id]
        if len(candidates) < K:
            raise InsufficientDataError(
                f"query {query.case_id}: only {len(candidates)} support candidates for K={K}")
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial] if shared else [seed, qi, trial])
            pick = rng.choice(len(candidates), size=K, replace=False)
            rows.append([candidates[int(i)] for i in sorted(pick)])
        out.append(rows)
    return out


def evaluate(checkpoint: Checkpoint, dataset: Sequence[Case], target_organ: int, K: int,
             trials: int = 5, seed: int = 0, support_pool: Sequence[Case] | None = None,
             adapt_config: TrainConfig | None = None) -> EvalReport:
    """Segment every query carrying ``target_organ`` with ``trials`` random support sets.

    Supports come from ``support_pool`` when given (one draw per trial,
    shared by all queries) and otherwise from the other target cases of
    ``dataset``.  With ``adapt_config`` the checkpoint is adapted to each
    distinct support set before segmenting.
    """
    queries = cases_with_organ(dataset, target_organ)
    pool = cases_with_organ(support_pool, target_organ) if support_pool is not None else queries
    if not queries:
        raise InsufficientDataError(f"no cases carry organ {target_organ}")
    if support_pool is None and len(queries) < K + 1:
        raise InsufficientDataError(f"need at least K+1={K + 1} cases of organ {target_organ}, "
                                    f"found {len(queries)}")
    sets = support_sets(queries, pool, K, trials, seed, shared=support_pool is not None)

    adapted: dict[tuple[str, ...], Checkpoint] = {}
    if adapt_config is not None:
        for row in sets:
            for trial, supports in enumerate(row):
                key = tuple(c.case_id for c in supports)
                if key not in adapted:
                    adapted[key] = adapt(checkpoint, supports, adapt_config, target_organ,
                                         seed=seed * 1000 + trial)

    def run(qi: int, trial: int) -> float:
        supports = sets[qi][trial]
        ckpt = adapted.get(tuple(c.case_id for c in supports), checkpoint)
        query = queries[qi]
        pred = segment_volume(ckpt, supports, query.volume, query.organ_range(target_organ),
                              target_organ)
        return dice_score(pred.labels == target_organ, query.labels.labels == target_organ)

    jobs = [(qi, t) for qi in range(len(queries)) for t in range(trials)]
    if thread_count() > 1:
        with ThreadPoolExecutor(thread_count()) as pool_exec:
            results = list(pool_exec.map(lambda j: run(*j), jobs))
    else:
        results = [run(*j) for j in jobs]
    scores = np.asarray(results, dtype=np.float64).reshape(len(queries), trials)
    return EvalReport.from_scores(scores.tolist(), K, [seed], [q.case_id for q in queries],
                                  adapted=adapt_config is not None)
