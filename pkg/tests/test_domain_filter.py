import math

import numpy as np
import pytest

from crossrec.config import TrainConfig
from crossrec.data import Catalog, TrainingInstance
from crossrec.domain_filter import (EpisodeTrace, PolicyParams,
                                    delayed_reward, high_state,
                                    immediate_reward, log_policy,
                                    log_policy_grad, low_state,
                                    make_episode_context, policy_gradients,
                                    policy_keep_prob, policy_prob,
                                    sample_episode, soft_update)
from crossrec.numerics import cosine_similarity, finite_difference_check
from crossrec.recommender import ModelParams, score_candidates


def small_model(seed=0, d=4):
    cfg = TrainConfig(embed_dim=d, attn_hidden=3, n_users_a=2, n_users_b=2,
                      max_seq_len=5)
    return ModelParams.init(np.random.default_rng(seed), Catalog(10, 12), cfg)


def instance(domain="B", hist=(4, 2, 11), hpos=(1, 3, 5), tr=(3, 7, 1),
             trpos=(0, 2, 4), query=9, target=9, negs=(1, 5)):
    return TrainingInstance("acc", domain, list(hist), list(hpos), list(tr),
                            list(trpos), list(range(len(tr))), query, target,
                            list(negs))


def forced_policy(embed_dim=4, hidden=8, keep_prob_sign=0.0):
    """Policy whose keep probability is sigmoid(keep_prob_sign) at any state:
    W2 = 0 so the hidden layer is ReLU(b) = 1, and w1 sums to the target."""
    pol = PolicyParams.init(np.random.default_rng(0), embed_dim, hidden)
    for name, t in pol.tensors.items():
        if name.endswith(".w2"):
            t[:] = 0.0
        elif name.endswith(".b"):
            t[:] = 1.0
        elif name.endswith(".w1"):
            t[:] = keep_prob_sign / hidden
    return pol


class TestPolicy:
    def test_zero_weights_give_half(self):
        pol = PolicyParams.init(np.random.default_rng(0), 4, 8)
        for name in pol.tensors:
            pol.tensors[name][:] = 0.0
        S = np.ones(6)
        assert policy_prob(pol, "high", "AtoB", S, 0) == pytest.approx(0.5)
        assert policy_prob(pol, "high", "AtoB", S, 1) == pytest.approx(0.5)

    def test_complementarity_exact(self):
        rng = np.random.default_rng(4)
        pol = PolicyParams.init(rng, 4, 8)
        for level, dim in (("high", 6), ("low", 10)):
            for _ in range(20):
                S = rng.normal(size=dim)
                p0 = policy_prob(pol, level, "BtoA", S, 0)
                p1 = policy_prob(pol, level, "BtoA", S, 1)
                assert p0 + p1 == 1.0

    def test_hand_case(self):
        # hidden width 1: W2 s + b = 2, w1 = 1 -> pi(S, 1) = sigmoid(2)
        pol = PolicyParams.init(np.random.default_rng(0), 4, 1)
        pol.tensors["high.AtoB.w2"][:] = 0.0
        pol.tensors["high.AtoB.b"][:] = 2.0
        pol.tensors["high.AtoB.w1"][:] = 1.0
        got = policy_prob(pol, "high", "AtoB", np.zeros(6), 1)
        assert got == pytest.approx(1.0 / (1.0 + math.exp(-2.0)))

    def test_log_policy_gradients_vs_fd(self):
        rng = np.random.default_rng(11)
        pol = PolicyParams.init(rng, 4, 8)
        for level, dim in (("high", 6), ("low", 10)):
            for action in (0, 1):
                S = rng.normal(size=dim)
                grads = log_policy_grad(pol, level, "AtoB", S, action)
                sub = {k: pol.tensors[k] for k in grads}
                err = finite_difference_check(
                    lambda: log_policy(pol, level, "AtoB", S, action),
                    sub, grads, h=1e-6)
                assert err < 1e-4


class TestStates:
    def test_high_state_single_matching_item(self):
        model = small_model()
        t = np.zeros(4)
        t[0] = 1.0
        model.tensors["emb.B"][9] = t        # query/target item, domain B
        model.tensors["emb.A"][3] = t        # the one transferred item
        inst = instance(tr=(3,), trpos=(0,))
        hs = high_state(model, inst)
        assert hs.mean_cosine == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(hs.mean_hadamard, t * t)
        assert 0.0 < hs.rec_prob < 1.0

    def test_high_state_negated_pair_cancels(self):
        model = small_model()
        e = np.array([0.3, -0.7, 0.2, 0.9])
        model.tensors["emb.A"][3] = e
        model.tensors["emb.A"][7] = -e
        inst = instance(tr=(3, 7), trpos=(0, 2))
        hs = high_state(model, inst)
        assert hs.mean_cosine == pytest.approx(0.0, abs=1e-9)
        np.testing.assert_allclose(hs.mean_hadamard, np.zeros(4), atol=1e-12)

    def test_high_state_matches_bruteforce(self):
        model = small_model(seed=9)
        inst = instance()
        hs = high_state(model, inst)
        t = model.tensors["emb.B"][9]
        embs = [model.tensors["emb.A"][i] for i in inst.transferred]
        assert hs.mean_cosine == pytest.approx(
            np.mean([cosine_similarity(e, t) for e in embs]), abs=1e-12)
        np.testing.assert_allclose(
            hs.mean_hadamard, np.mean([e * t for e in embs], axis=0))
        assert hs.rec_prob == pytest.approx(
            float(score_candidates(model, inst, [9])[0]))
        assert hs.vector().shape == (6,)

    def test_low_state_single_matching_item(self):
        t = np.array([1.0, 0.0, 0.0])
        ls = low_state(t[None, :], set(), 0, t)
        assert ls.item_cosine == pytest.approx(1.0, abs=1e-9)
        assert ls.mean_reserved_cosine == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(ls.abs_diff, np.zeros(3))

    def test_low_state_orthogonal_item(self):
        t = np.array([1.0, 0.0])
        e = np.array([0.0, 1.0])
        ls = low_state(e[None, :], set(), 0, t)
        assert ls.item_cosine == pytest.approx(0.0, abs=1e-9)

    def test_low_state_mid_episode_bruteforce(self):
        # 3 items, item 0 was dropped: reserved at m=1 is {1, 2}
        rng = np.random.default_rng(3)
        embs = rng.normal(size=(3, 4))
        t = rng.normal(size=4)
        ls = low_state(embs, set(), 1, t)
        cos = [cosine_similarity(e, t) for e in embs]
        assert ls.item_cosine == pytest.approx(cos[1], abs=1e-12)
        assert ls.mean_reserved_cosine == pytest.approx(
            np.mean([cos[1], cos[2]]), abs=1e-12)
        np.testing.assert_allclose(ls.abs_diff, np.abs(embs[1] - t))
        np.testing.assert_allclose(
            ls.mean_abs_diff,
            np.mean([np.abs(embs[1] - t), np.abs(embs[2] - t)], axis=0))
        assert ls.vector().shape == (10,)

    def test_low_state_keeps_previous_choices(self):
        rng = np.random.default_rng(3)
        embs = rng.normal(size=(3, 4))
        t = rng.normal(size=4)
        ls = low_state(embs, {0}, 2, t)
        cos = [cosine_similarity(e, t) for e in embs]
        assert ls.mean_reserved_cosine == pytest.approx(
            np.mean([cos[0], cos[2]]), abs=1e-12)


class TestRewards:
    def test_equal_cosines_keep_reward_zero(self):
        t = np.array([1.0, 0.0])
        embs = np.array([[1.0, 1.0], [2.0, 2.0], [0.5, 0.5]])
        for m in range(2):
            assert immediate_reward(embs, set(range(m)), m, 1, t) == \
                pytest.approx(0.0, abs=1e-9)

    def test_hand_case_readds_mean(self):
        t = np.array([1.0, 0.0])
        embs = np.array([[0.9, math.sqrt(1 - 0.81)],
                         [0.1, math.sqrt(1 - 0.01)]])
        assert immediate_reward(embs, set(), 0, 1, t) == pytest.approx(
            0.4, abs=1e-9)
        assert immediate_reward(embs, set(), 0, 0, t) == pytest.approx(
            -0.4, abs=1e-9)

    def test_singleton_conventions(self):
        t = np.array([1.0, 0.0])
        e = np.array([[0.8, 0.6]])
        assert immediate_reward(e, set(), 0, 1, t) == 0.0
        assert immediate_reward(e, set(), 0, 0, t) == pytest.approx(
            -0.8, abs=1e-9)

    def test_delayed_reward_identity_cases(self):
        model = small_model()
        inst = instance()
        assert delayed_reward(model, inst, [1, 1, 1]) == 0.0
        assert delayed_reward(model, inst, [0, 0, 0]) == 0.0

    def test_delayed_reward_planted_noise_positive(self):
        # make transferred item 7 point away from the target's direction and
        # item 3 toward it; dropping 7 must raise p(target)
        model = small_model(seed=2)
        inst = instance(tr=(3, 7), trpos=(0, 2))
        base = delayed_reward(model, inst, [1, 0])
        probs_orig = float(score_candidates(model, inst, [9])[0])
        found = False
        for scale in (4.0, 8.0, 16.0):
            m = small_model(seed=2)
            t_dir = m.tensors["emb.B"][9]
            m.tensors["emb.A"][3] = t_dir * scale
            m.tensors["emb.A"][7] = -t_dir * scale
            r = delayed_reward(m, instance(tr=(3, 7), trpos=(0, 2)), [1, 0])
            if r > 0:
                found = True
                break
        assert found, f"no scale produced a positive gain (base {base}, " \
                      f"p_orig {probs_orig})"

    def test_reward_attribution_three_items(self):
        model = small_model(seed=5)
        pol = forced_policy(keep_prob_sign=5.0)  # keeps nearly surely
        inst = instance()
        rng = np.random.default_rng(0)
        trace = sample_episode(rng, pol, model, inst, force_high=1)
        assert trace.low_actions == [1, 1, 1]
        embs, t = model.tensors["emb.A"][list(inst.transferred)], \
            model.tensors["emb.B"][9]
        expect = []
        kept = set()
        for m, a in enumerate(trace.low_actions):
            expect.append(immediate_reward(embs, kept, m, a, t))
            kept.add(m)
        expect[-1] += delayed_reward(model, inst, trace.kept_mask)
        np.testing.assert_allclose(trace.rewards, expect)
        assert trace.final_reward == pytest.approx(
            delayed_reward(model, inst, trace.kept_mask))


class TestEpisodes:
    def test_forced_zero_high(self):
        model = small_model()
        pol = forced_policy(keep_prob_sign=-20.0)
        inst = instance()
        rng = np.random.default_rng(0)
        trace = sample_episode(rng, pol, model, inst)
        assert trace.high_action == 0
        assert trace.low_actions == [] and trace.low_states == []
        assert trace.high_reward == 0.0 and trace.total_reward() == 0.0
        assert trace.revised(inst) is inst

    def test_greedy_keeps_everything_at_high_prob(self):
        model = small_model()
        pol = forced_policy(keep_prob_sign=2.2)  # sigmoid(2.2) ~ 0.9
        inst = instance()
        trace = sample_episode(None, pol, model, inst, greedy=True)
        assert trace.high_action == 1
        assert trace.low_actions == [1, 1, 1]
        assert trace.revised(inst).transferred == list(inst.transferred)

    def test_fixed_seed_reproducible(self):
        model = small_model(seed=1)
        pol = PolicyParams.init(np.random.default_rng(2), 4, 8)
        inst = instance()
        t1 = sample_episode(np.random.default_rng(42), pol, model, inst)
        t2 = sample_episode(np.random.default_rng(42), pol, model, inst)
        assert t1.low_actions == t2.low_actions
        assert t1.high_action == t2.high_action
        np.testing.assert_array_equal(t1.rewards, t2.rewards)

    def test_empty_transfer_rejected(self):
        model = small_model()
        pol = forced_policy()
        with pytest.raises(ValueError):
            sample_episode(np.random.default_rng(0), pol, model,
                           instance(tr=(), trpos=()))

    def test_low_only_visits_every_item(self):
        model = small_model()
        pol = PolicyParams.init(np.random.default_rng(2), 4, 8)
        inst = instance()
        trace = sample_episode(np.random.default_rng(3), pol, model, inst,
                               mode="low_only")
        assert len(trace.low_actions) == len(inst.transferred)
        assert trace.high_state is None

    def test_greedy_mode_thresholds(self):
        model = small_model()
        pol = forced_policy()
        inst = instance()
        # mu1 huge -> always revise; mu2 = -1 keeps everything
        t = sample_episode(None, pol, model, inst, mode="greedy",
                           greedy_mu=(1e9, -1.0))
        assert t.high_action == 1 and t.kept_mask == [1, 1, 1]
        # mu2 just above +1 drops everything
        t = sample_episode(None, pol, model, inst, mode="greedy",
                           greedy_mu=(1e9, 1.0 + 1e-9))
        assert t.kept_mask == [0, 0, 0]
        # mu1 tiny -> never revise
        t = sample_episode(None, pol, model, inst, mode="greedy",
                           greedy_mu=(-1e9, 0.0))
        assert t.high_action == 0

    def test_high_only_drops_whole_sequence(self):
        model = small_model()
        pol = forced_policy(keep_prob_sign=20.0)
        inst = instance()
        trace = sample_episode(np.random.default_rng(0), pol, model, inst,
                               mode="high_only")
        assert trace.high_action == 1
        assert trace.kept_mask == [0, 0, 0]
        assert trace.low_actions == []
        assert trace.revised(inst).transferred == []


class TestPolicyGradients:
    def test_zero_rewards_zero_gradients(self):
        pol = PolicyParams.init(np.random.default_rng(0), 4, 8)
        trace = EpisodeTrace(direction="AtoB", high_state=np.ones(6),
                             high_action=1,
                             low_states=[np.ones(10)], low_actions=[1],
                             kept_mask=[1], rewards=[0.0], high_reward=0.0)
        grads = policy_gradients(pol, [trace])
        assert all(np.all(g == 0) for g in grads.values())

    def test_opposite_rewards_cancel(self):
        pol = PolicyParams.init(np.random.default_rng(0), 4, 8)
        S = np.ones(10)
        mk = lambda r: EpisodeTrace(direction="AtoB", high_state=None,
                                    high_action=1, low_states=[S],
                                    low_actions=[1], kept_mask=[1],
                                    rewards=[r])
        grads = policy_gradients(pol, [mk(0.7), mk(-0.7)])
        for g in grads.values():
            np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_empty_trace_list_rejected(self):
        pol = PolicyParams.init(np.random.default_rng(0), 4, 8)
        with pytest.raises(ValueError):
            policy_gradients(pol, [])

    def test_single_trace_matches_scaled_log_grad(self):
        rng = np.random.default_rng(6)
        pol = PolicyParams.init(rng, 4, 8)
        S = rng.normal(size=10)
        trace = EpisodeTrace(direction="BtoA", high_state=None, high_action=1,
                             low_states=[S], low_actions=[0], kept_mask=[0],
                             rewards=[2.5])
        grads = policy_gradients(pol, [trace])
        ref = log_policy_grad(pol, "low", "BtoA", S, 0)
        for k, g in ref.items():
            np.testing.assert_allclose(grads[k], 2.5 * g, atol=1e-12)

    def test_reinforce_unbiased_on_enumerable_episode(self):
        # single-item episode, low level only: two outcomes (keep / drop)
        model = small_model(seed=8, d=2)
        pol = PolicyParams.init(np.random.default_rng(1), 2, 8)
        inst = instance(tr=(3,), trpos=(0,))
        ctx_rng = np.random.default_rng(123)
        ctx = make_episode_context(model, inst)

        def one_trace(rng):
            return sample_episode(rng, pol, model, inst, mode="low_only",
                                  ctx=ctx)

        # exact expectation over both outcomes
        probe = one_trace(np.random.default_rng(0))
        S = probe.low_states[0]
        direction = probe.direction
        exact = {k: np.zeros_like(v) for k, v in pol.tensors.items()}
        p1 = policy_keep_prob(pol, "low", direction, S)
        for action, pa in ((1, p1), (0, 1.0 - p1)):
            trace = EpisodeTrace(direction=direction, high_state=None,
                                 high_action=1, low_states=[S],
                                 low_actions=[action], kept_mask=[action],
                                 rewards=[0.0])
            from crossrec.domain_filter import combined_reward
            combined_reward(trace, model, inst)
            g = policy_gradients(pol, [trace])
            for k in exact:
                exact[k] += pa * g[k]

        n = 20_000
        sums = {k: np.zeros_like(v) for k, v in pol.tensors.items()}
        sq = {k: np.zeros_like(v) for k, v in pol.tensors.items()}
        for _ in range(n):
            g = policy_gradients(pol, [one_trace(ctx_rng)])
            for k in sums:
                sums[k] += g[k]
                sq[k] += g[k] * g[k]
        for k in sums:
            mean = sums[k] / n
            var = sq[k] / n - mean ** 2
            se = np.sqrt(np.maximum(var, 0.0) / n)
            diff = np.abs(mean - exact[k])
            zero = se < 1e-14
            assert np.all(diff[zero] < 1e-12)
            assert np.all(diff[~zero] <= 3.0 * se[~zero]), \
                f"{k}: max z = {(diff[~zero] / se[~zero]).max():.2f}"

    def test_bandit_toy_learns_to_keep(self):
        # keeping pays +1, dropping -1; 500 plain ascent steps at lr 0.05
        pol = PolicyParams.init(np.random.default_rng(5), 4, 8)
        S = np.ones(10)
        rng = np.random.default_rng(6)
        for _ in range(500):
            p1 = policy_keep_prob(pol, "low", "AtoB", S)
            action = 1 if rng.random() < p1 else 0
            trace = EpisodeTrace(direction="AtoB", high_state=None,
                                 high_action=1, low_states=[S],
                                 low_actions=[action], kept_mask=[action],
                                 rewards=[1.0 if action else -1.0])
            grads = policy_gradients(pol, [trace])
            for k, g in grads.items():
                pol.tensors[k] += 0.05 * g
        assert policy_keep_prob(pol, "low", "AtoB", S) > 0.9


class TestSoftUpdate:
    def _pols(self):
        old = PolicyParams.init(np.random.default_rng(0), 4, 8)
        cand = PolicyParams.init(np.random.default_rng(1), 4, 8)
        return old, cand

    def test_rate_zero_is_old(self):
        old, cand = self._pols()
        new = soft_update(old, cand, 0.0)
        for k in old.tensors:
            np.testing.assert_array_equal(new.tensors[k], old.tensors[k])

    def test_rate_one_is_candidate(self):
        old, cand = self._pols()
        new = soft_update(old, cand, 1.0)
        for k in old.tensors:
            np.testing.assert_array_equal(new.tensors[k], cand.tensors[k])

    def test_hand_value(self):
        old, cand = self._pols()
        old.tensors["high.AtoB.b"][:] = 1.0
        cand.tensors["high.AtoB.b"][:] = 3.0
        new = soft_update(old, cand, 0.0005)
        assert new.tensors["high.AtoB.b"][0] == pytest.approx(1.001, abs=1e-12)

    def test_idempotent_after_zero_rate(self):
        old, cand = self._pols()
        blended = soft_update(old, cand, 0.3)
        again = soft_update(blended, cand, 0.0)
        for k in old.tensors:
            np.testing.assert_array_equal(again.tensors[k], blended.tensors[k])

    def test_shape_mismatch(self):
        from crossrec.numerics import DimensionError
        old, cand = self._pols()
        cand.tensors["high.AtoB.b"] = np.zeros(3)
        with pytest.raises(DimensionError):
            soft_update(old, cand, 0.1)
