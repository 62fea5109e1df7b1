"""Leave-one-out top-N ranking evaluation: HR@N and NDCG@N.

Each test instance ranks its held-out target among candidate items. Ties
are broken against the target, so reported metrics are deterministic lower
bounds. NDCG uses the single-ground-truth normalization (ideal DCG = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import DOMAINS, TrainingInstance
from .domain_filter import (MODE_FULL, PolicyParams, make_episode_context,
                            sample_episode)
from .recommender import ModelParams, score_candidates


class EvalError(ValueError):
    """Evaluation asked of an empty or inconsistent test set."""


@dataclass
class EvalResult:
    domain: str
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_instances: int


def filtered_for_eval(model: ModelParams, policies: PolicyParams | None,
                      instance: TrainingInstance, mode: str = MODE_FULL,
                      greedy_mu: tuple[float, float] = (0.0, 0.0)
                      ) -> TrainingInstance:
    """Apply the transfer filter with greedy (max-probability) actions.
    With no policies, or nothing transferred, the instance passes through."""
    if policies is None or not instance.transferred:
        return instance
    ctx = make_episode_context(model, instance)
    trace = sample_episode(None, policies, model, instance, mode=mode,
                           greedy=True, greedy_mu=greedy_mu, ctx=ctx,
                           compute_rewards=False)
    return trace.revised(instance)


def rank_target(model: ModelParams, policies: PolicyParams | None,
                instance: TrainingInstance, candidates,
                filter_mode: str = MODE_FULL,
                greedy_mu: tuple[float, float] = (0.0, 0.0)) -> int:
    """1-based rank of the target among the candidates; the target must be
    one of them. Candidates scoring equal to the target count against it."""
    candidates = np.asarray(candidates, dtype=np.int64)
    matches = np.nonzero(candidates == instance.target)[0]
    if matches.size == 0:
        raise IndexError("target item missing from candidate set")
    inst = filtered_for_eval(model, policies, instance, filter_mode, greedy_mu)
    scores = score_candidates(model, inst, candidates)
    t = scores[matches[0]]
    others = np.delete(scores, matches[0])
    return 1 + int(np.count_nonzero(others >= t))


def hit_ratio(ranks: list[int], n: int) -> float:
    if not ranks:
        raise EvalError("hit_ratio of an empty rank list")
    return sum(1 for r in ranks if r <= n) / len(ranks)


def ndcg(ranks: list[int], n: int) -> float:
    if not ranks:
        raise EvalError("ndcg of an empty rank list")
    return sum(1.0 / math.log2(r + 1) for r in ranks if r <= n) / len(ranks)


def candidate_set(instance: TrainingInstance, catalog_size: int,
                  mode: str = "full") -> np.ndarray:
    """Full catalog, or the target plus the instance's sampled negatives."""
    if mode == "full":
        return np.arange(1, catalog_size + 1)
    if mode == "sampled":
        return np.asarray([instance.target] + list(instance.negatives))
    raise EvalError(f"unknown candidate mode '{mode}'")


def evaluate(model: ModelParams, policies: PolicyParams | None,
             test_set: list[TrainingInstance], cutoffs: list[int],
             candidate_mode: str = "full", filter_mode: str = MODE_FULL,
             greedy_mu: tuple[float, float] = (0.0, 0.0)
             ) -> dict[str, EvalResult]:
    """Average HR@N / NDCG@N per domain over the test set. Deterministic:
    greedy filtering, no dropout, no sampling beyond the instances' own
    stored negatives."""
    if not test_set:
        raise EvalError("empty test set")
    ranks: dict[str, list[int]] = {d: [] for d in DOMAINS}
    for inst in test_set:
        cands = candidate_set(inst, model.n_items[inst.domain], candidate_mode)
        ranks[inst.domain].append(
            rank_target(model, policies, inst, cands, filter_mode, greedy_mu))
    out: dict[str, EvalResult] = {}
    for dom in DOMAINS:
        if not ranks[dom]:
            continue
        out[dom] = EvalResult(
            domain=dom,
            hr={n: hit_ratio(ranks[dom], n) for n in cutoffs},
            ndcg={n: ndcg(ranks[dom], n) for n in cutoffs},
            n_instances=len(ranks[dom]))
    return out


def results_to_csv(results: dict[str, EvalResult]) -> str:
    lines = ["domain,cutoff,hr,ndcg,instances"]
    for dom in sorted(results):
        r = results[dom]
        for n in sorted(r.hr):
            lines.append(f"{dom},{n},{r.hr[n]!r},{r.ndcg[n]!r},{r.n_instances}")
    return "\n".join(lines) + "\n"


def results_table(results: dict[str, EvalResult]) -> str:
    lines = [f"{'domain':<8}{'N':>4}{'HR@N':>10}{'NDCG@N':>10}{'count':>8}"]
    for dom in sorted(results):
        r = results[dom]
        for n in sorted(r.hr):
            lines.append(f"{dom:<8}{n:>4}{r.hr[n]:>10.4f}{r.ndcg[n]:>10.4f}"
                         f"{r.n_instances:>8}")
    return "\n".join(lines)
