"""Hierarchical policy that prunes transferred cross-domain sequences.

A two-level agent revises the sequence handed from the source domain to the
target domain before the recommender consumes it. The high level makes one
binary call per sequence: leave it untouched (action 0, reward 0) or revise
it (action 1). When revising, the low level walks the items in order and
keeps (action 1) or drops (action 0) each one.

Rewards combine a per-action shaping term (the change in mean cosine
similarity between the candidate set and the target item) with a terminal
term credited to the last low action: the log-probability gain of the true
target under the revised versus the original transferred sequence. Policies
are trained with plain Monte-Carlo policy gradients averaged over a handful
of sampled trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import TrainingInstance
from .numerics import DimensionError, relu, sigmoid, xavier_uniform
from .recommender import SIDES, ModelParams, PROB_CLIP, score_candidates

LEVELS = ("high", "low")
DIRECTIONS = ("AtoB", "BtoA")
# target domain -> transfer direction feeding it
DIRECTION_FOR_DOMAIN = {"A": "BtoA", "B": "AtoB"}

MODE_FULL = "full"
MODE_HIGH_ONLY = "high_only"
MODE_LOW_ONLY = "low_only"
MODE_GREEDY = "greedy"
MODES = (MODE_FULL, MODE_HIGH_ONLY, MODE_LOW_ONLY, MODE_GREEDY)


def state_dims(embed_dim: int) -> dict[str, int]:
    # high: [mean cosine, mean hadamard (d), rec prob]
    # low:  [item cosine, mean reserved cosine, |diff| (d), mean |diff| (d)]
    return {"high": embed_dim + 2, "low": 2 * embed_dim + 2}


@dataclass
class PolicyParams:
    """Weights of both levels for both transfer directions."""

    tensors: dict[str, np.ndarray]
    embed_dim: int
    hidden: int

    @classmethod
    def init(cls, rng: np.random.Generator, embed_dim: int,
             hidden: int) -> "PolicyParams":
        dims = state_dims(embed_dim)
        t: dict[str, np.ndarray] = {}
        for level in LEVELS:
            for direction in DIRECTIONS:
                key = f"{level}.{direction}"
                t[f"{key}.w2"] = xavier_uniform(rng, (hidden, dims[level]))
                t[f"{key}.b"] = np.zeros(hidden)
                t[f"{key}.w1"] = xavier_uniform(rng, (hidden,))
        return cls(tensors=t, embed_dim=embed_dim, hidden=hidden)

    def clone(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.tensors.items()},
                            self.embed_dim, self.hidden)


@dataclass
class HighState:
    mean_cosine: float
    mean_hadamard: np.ndarray
    rec_prob: float

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.mean_cosine], self.mean_hadamard,
                               [self.rec_prob]])


@dataclass
class LowState:
    item_cosine: float
    mean_reserved_cosine: float
    abs_diff: np.ndarray
    mean_abs_diff: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.item_cosine], [self.mean_reserved_cosine],
                               self.abs_diff, self.mean_abs_diff])


def _cosines(embs: np.ndarray, target_emb: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity to the target, epsilon-guarded."""
    norms = np.linalg.norm(embs, axis=1) * np.linalg.norm(target_emb) + 1e-12
    return np.clip(embs @ target_emb / norms, -1.0, 1.0)


def high_state(model: ModelParams, instance: TrainingInstance,
               rec_prob: float | None = None) -> HighState:
    """Sequence-level features: mean cosine and mean elementwise product of
    transferred items against the supervision item, plus the recommender's
    current probability for that item."""
    if not instance.transferred:
        raise ValueError("high_state needs a nonempty transferred sequence")
    embs, target_emb = transfer_embeddings(model, instance)
    if rec_prob is None:
        rec_prob = float(score_candidates(model, instance, [instance.query])[0])
    return HighState(mean_cosine=float(_cosines(embs, target_emb).mean()),
                     mean_hadamard=(embs * target_emb).mean(axis=0),
                     rec_prob=rec_prob)


def low_state(transferred_embs: np.ndarray, kept_so_far: set[int], m: int,
              target_emb: np.ndarray) -> LowState:
    """Item-level features for position m. "Reserved" items are those kept by
    earlier actions plus every position from m onward (not yet decided)."""
    n = transferred_embs.shape[0]
    if not 0 <= m < n:
        raise IndexError(f"item index {m} out of range")
    reserved = sorted(kept_so_far) + list(range(m, n))
    cos = _cosines(transferred_embs, target_emb)
    diffs = np.abs(transferred_embs - target_emb)
    return LowState(item_cosine=float(cos[m]),
                    mean_reserved_cosine=float(cos[reserved].mean()),
                    abs_diff=diffs[m],
                    mean_abs_diff=diffs[reserved].mean(axis=0))


def transfer_embeddings(model: ModelParams, instance: TrainingInstance):
    """Raw embedding rows of the transferred items and of the supervision
    item (positions are a sequence-encoder concern, not a similarity one)."""
    _, _, own_table, tr_table = SIDES[instance.domain]
    embs = model.tensors[tr_table][np.asarray(instance.transferred)]
    target_emb = model.tensors[own_table][instance.query]
    return embs, target_emb


def policy_keep_prob(policies: PolicyParams, level: str, direction: str,
                     state_vec: np.ndarray) -> float:
    """P(action = 1 | state): sigmoid(w1 . ReLU(W2 s + b))."""
    key = f"{level}.{direction}"
    w2 = policies.tensors[f"{key}.w2"]
    if state_vec.shape != (w2.shape[1],):
        raise DimensionError(
            f"state dim {state_vec.shape} does not match {key} ({w2.shape[1]})")
    hidden = relu(w2 @ state_vec + policies.tensors[f"{key}.b"])
    return float(sigmoid(policies.tensors[f"{key}.w1"] @ hidden))


def policy_prob(policies: PolicyParams, level: str, direction: str,
                state_vec: np.ndarray, action: int) -> float:
    """pi(S, a) = a p1 + (1 - a)(1 - p1); complements sum to 1 exactly."""
    p1 = policy_keep_prob(policies, level, direction, state_vec)
    return action * p1 + (1 - action) * (1.0 - p1)


def log_policy(policies: PolicyParams, level: str, direction: str,
               state_vec: np.ndarray, action: int) -> float:
    p = policy_prob(policies, level, direction, state_vec, action)
    return math.log(max(p, PROB_CLIP))


def accumulate_log_policy_grad(policies: PolicyParams, level: str,
                               direction: str, state_vec: np.ndarray,
                               action: int, weight: float,
                               grads: dict[str, np.ndarray]) -> None:
    """grads += weight * d log pi(S, a) / d Phi for one (state, action)."""
    key = f"{level}.{direction}"
    w2 = policies.tensors[f"{key}.w2"]
    w1 = policies.tensors[f"{key}.w1"]
    z = w2 @ state_vec + policies.tensors[f"{key}.b"]
    hidden = relu(z)
    p1 = float(sigmoid(w1 @ hidden))
    # d log pi / d (w1 . hidden) = a - p1 for both actions
    dq = (action - p1) * weight
    grads[f"{key}.w1"] += dq * hidden
    dh = dq * w1 * (z > 0)
    grads[f"{key}.w2"] += np.outer(dh, state_vec)
    grads[f"{key}.b"] += dh


def log_policy_grad(policies: PolicyParams, level: str, direction: str,
                    state_vec: np.ndarray, action: int) -> dict[str, np.ndarray]:
    key = f"{level}.{direction}"
    grads = {f"{key}.{p}": np.zeros_like(policies.tensors[f"{key}.{p}"])
             for p in ("w2", "b", "w1")}
    accumulate_log_policy_grad(policies, level, direction, state_vec, action,
                               1.0, grads)
    return grads


def immediate_reward(transferred_embs: np.ndarray, kept_before: set[int],
                     m: int, action: int, target_emb: np.ndarray) -> float:
    """Change in mean cosine-to-target of the candidate set caused by the
    action on item m. Keeping a better-than-average item or dropping a
    worse-than-average one earns a positive reward.

    The candidate set S at decision time is kept_before plus every position
    from m onward. For |S| = 1 the set without m is empty: keeps earn 0 and
    drops earn -meanCos(S).
    """
    n = transferred_embs.shape[0]
    S = sorted(kept_before) + list(range(m, n))
    cos = _cosines(transferred_embs, target_emb)
    mean_with = float(cos[S].mean())
    rest = [i for i in S if i != m]
    if not rest:
        return 0.0 if action == 1 else -mean_with
    delta = mean_with - float(cos[rest].mean())
    return delta if action == 1 else -delta


def revise_instance(instance: TrainingInstance,
                    kept_mask: list[int]) -> TrainingInstance:
    """Copy of the instance with only the kept transferred items (their
    original positions travel with them)."""
    keep = [i for i, k in enumerate(kept_mask) if k]
    return TrainingInstance(
        account_id=instance.account_id, domain=instance.domain,
        history=instance.history, history_pos=instance.history_pos,
        transferred=[instance.transferred[i] for i in keep],
        transferred_pos=[instance.transferred_pos[i] for i in keep],
        transferred_event_idx=[instance.transferred_event_idx[i] for i in keep],
        query=instance.query, target=instance.target,
        negatives=instance.negatives, is_test=instance.is_test)


def delayed_reward(model: ModelParams, instance: TrainingInstance,
                   kept_mask: list[int]) -> float:
    """log p(target | revised transfer) - log p(target | original transfer).

    Zero when nothing changed and, by convention, when everything was
    removed (the recommender then falls back to own-domain evidence only).
    """
    if all(kept_mask):
        return 0.0
    if not any(kept_mask):
        return 0.0
    p_orig = float(score_candidates(model, instance, [instance.target])[0])
    revised = revise_instance(instance, kept_mask)
    p_rev = float(score_candidates(model, revised, [instance.target])[0])
    return math.log(max(p_rev, PROB_CLIP)) - math.log(max(p_orig, PROB_CLIP))


@dataclass
class EpisodeTrace:
    """States, actions, and rewards of one filtering episode."""

    direction: str
    high_state: np.ndarray | None
    high_action: int
    low_states: list[np.ndarray] = field(default_factory=list)
    low_actions: list[int] = field(default_factory=list)
    kept_mask: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    high_reward: float = 0.0
    final_reward: float = 0.0

    def total_reward(self) -> float:
        return self.high_reward + sum(self.rewards)

    def revised(self, instance: TrainingInstance) -> TrainingInstance:
        if self.high_action == 0:
            return instance
        return revise_instance(instance, self.kept_mask)


@dataclass
class EpisodeContext:
    """Per-instance quantities shared by every sampled episode: embeddings,
    cosines, and the recommender probability are all fixed while the
    recommender is held constant."""

    instance: TrainingInstance
    direction: str
    embs: np.ndarray
    target_emb: np.ndarray
    cosines: np.ndarray
    rec_prob: float
    high_vec: np.ndarray


def make_episode_context(model: ModelParams,
                         instance: TrainingInstance) -> EpisodeContext | None:
    """Returns None when there is nothing to filter."""
    if not instance.transferred:
        return None
    embs, target_emb = transfer_embeddings(model, instance)
    rec_prob = float(score_candidates(model, instance, [instance.query])[0])
    hs = high_state(model, instance, rec_prob=rec_prob)
    return EpisodeContext(instance=instance,
                          direction=DIRECTION_FOR_DOMAIN[instance.domain],
                          embs=embs, target_emb=target_emb,
                          cosines=_cosines(embs, target_emb),
                          rec_prob=rec_prob, high_vec=hs.vector())


def _choose(rng, p1: float, greedy: bool) -> int:
    if greedy:
        return 1 if p1 >= 0.5 else 0
    return 1 if rng.random() < p1 else 0


def sample_episode(rng: np.random.Generator | None, policies: PolicyParams,
                   model: ModelParams, instance: TrainingInstance,
                   mode: str = MODE_FULL, greedy: bool = False,
                   force_high: int | None = None,
                   greedy_mu: tuple[float, float] = (0.0, 0.0),
                   ctx: EpisodeContext | None = None,
                   compute_rewards: bool = True) -> EpisodeTrace:
    """Run one filtering episode over the instance's transferred sequence.

    mode selects the agent variant: the full hierarchy, one-level ablations,
    or the threshold baseline (greedy_mu = (mu1, mu2): revise when
    log(rec prob) < mu1, drop items with cosine < mu2, no learning).
    """
    if mode not in MODES:
        raise ValueError(f"unknown filter mode '{mode}'")
    if ctx is None:
        ctx = make_episode_context(model, instance)
    if ctx is None:
        raise ValueError("cannot filter an empty transferred sequence")
    n = len(instance.transferred)
    direction = ctx.direction

    if mode == MODE_GREEDY:
        revise = math.log(max(ctx.rec_prob, PROB_CLIP)) < greedy_mu[0]
        trace = EpisodeTrace(direction=direction, high_state=None,
                             high_action=1 if revise else 0)
        if revise:
            trace.kept_mask = [int(c >= greedy_mu[1]) for c in ctx.cosines]
            trace.low_actions = list(trace.kept_mask)
        return trace

    if mode == MODE_LOW_ONLY:
        trace = EpisodeTrace(direction=direction, high_state=None, high_action=1)
    else:
        if force_high is not None:
            high_action = force_high
        else:
            p1 = policy_keep_prob(policies, "high", direction, ctx.high_vec)
            high_action = _choose(rng, p1, greedy)
        trace = EpisodeTrace(direction=direction, high_state=ctx.high_vec,
                             high_action=high_action)
        if high_action == 0:
            return trace
        if mode == MODE_HIGH_ONLY:
            # revision without a low level drops the whole sequence
            trace.kept_mask = [0] * n
            if compute_rewards:
                p_orig = float(
                    score_candidates(model, instance, [instance.target])[0])
                bare = revise_instance(instance, trace.kept_mask)
                p_bare = float(
                    score_candidates(model, bare, [instance.target])[0])
                trace.high_reward = math.log(max(p_bare, PROB_CLIP)) - \
                    math.log(max(p_orig, PROB_CLIP))
                trace.final_reward = trace.high_reward
            return trace

    kept: set[int] = set()
    for m in range(n):
        ls = low_state(ctx.embs, kept, m, ctx.target_emb)
        vec = ls.vector()
        p1 = policy_keep_prob(policies, "low", direction, vec)
        action = _choose(rng, p1, greedy)
        trace.low_states.append(vec)
        trace.low_actions.append(action)
        if compute_rewards:
            trace.rewards.append(
                immediate_reward(ctx.embs, kept, m, action, ctx.target_emb))
        if action == 1:
            kept.add(m)
    trace.kept_mask = list(trace.low_actions)
    if compute_rewards:
        delayed = delayed_reward(model, instance, trace.kept_mask)
        trace.final_reward = delayed
        trace.rewards[-1] += delayed
        trace.high_reward = delayed if trace.high_state is not None else 0.0
    return trace


def combined_reward(trace: EpisodeTrace, model: ModelParams,
                    instance: TrainingInstance) -> EpisodeTrace:
    """Fill in the reward fields of a trace sampled with
    compute_rewards=False: immediate rewards per low action, the delayed
    term added to the last low action, and the high-level reward."""
    if trace.high_action == 0:
        trace.high_reward = 0.0
        trace.rewards = []
        return trace
    ctx = make_episode_context(model, instance)
    kept: set[int] = set()
    rewards = []
    for m, action in enumerate(trace.low_actions):
        rewards.append(
            immediate_reward(ctx.embs, kept, m, action, ctx.target_emb))
        if action == 1:
            kept.add(m)
    delayed = delayed_reward(model, instance, trace.kept_mask)
    if rewards:
        rewards[-1] += delayed
    trace.rewards = rewards
    trace.final_reward = delayed
    trace.high_reward = delayed if trace.high_state is not None else 0.0
    return trace


def policy_gradients(policies: PolicyParams,
                     traces: list[EpisodeTrace]) -> dict[str, np.ndarray]:
    """Monte-Carlo policy gradient, ASCENT direction, averaged over traces:
    (1/J) sum_j [ dlogpi_h R_h + sum_m dlogpi_l(S_m, a_m) R_m ].
    """
    if not traces:
        raise ValueError("policy_gradients needs at least one trace")
    grads = {k: np.zeros_like(v) for k, v in policies.tensors.items()}
    for tr in traces:
        if tr.high_state is not None and tr.high_reward != 0.0:
            accumulate_log_policy_grad(policies, "high", tr.direction,
                                       tr.high_state, tr.high_action,
                                       tr.high_reward, grads)
        for vec, action, reward in zip(tr.low_states, tr.low_actions,
                                       tr.rewards):
            if reward != 0.0:
                accumulate_log_policy_grad(policies, "low", tr.direction,
                                           vec, action, reward, grads)
    inv = 1.0 / len(traces)
    for g in grads.values():
        g *= inv
    return grads


def soft_update(old: PolicyParams, candidate: PolicyParams,
                rate: float) -> PolicyParams:
    """Convex blend: new = rate * candidate + (1 - rate) * old."""
    out = {}
    for name, o in old.tensors.items():
        c = candidate.tensors[name]
        if c.shape != o.shape:
            raise DimensionError(f"soft_update shape mismatch for '{name}'")
        out[name] = rate * c + (1.0 - rate) * o
    return PolicyParams(out, old.embed_dim, old.hidden)
