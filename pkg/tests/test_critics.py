import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import ACT_DIM, OBS_DIM, critic_fd_error, random_batch, random_setup
from pessimism import plain_gap, regularizer_step
from rankq.critics import (
    BatchError, ConfigError, CriticObjectiveConfig, CriticPair, LagrangeMultiplier, UniformPolicy, calql_regularizer,
    cql_regularizer, cql_term, critic_loss, make_negatives, polyak_update, rank_fn, rank_term, rankq_loss,
    td_loss, td_target, td_term,
)
from rankq.ndmath import Adam, NonFiniteError

LN2 = math.log(2.0)


def constant_pair(value, obs_dim=OBS_DIM, act_dim=ACT_DIM):
    """Critic pair whose live and target nets all output ``value``."""
    pair = CriticPair(obs_dim, act_dim, (4,))
    for net in pair.q + pair.targets:
        net.set_flat(np.zeros(net.num_params))
        net.biases[-1][...] = value
    return pair


def q_dict(a, noisy, very_noisy, random, permuted):
    return {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in
            dict(a=a, noisy=noisy, very_noisy=very_noisy, random=random, permuted=permuted).items()}


class TestTD:
    def test_terminal_target(self):
        b = random_batch(np.random.default_rng(0), 1)
        b.terminated[:], b.rewards[:] = True, 1.0
        assert td_target(constant_pair(5.0), b, np.zeros((1, ACT_DIM)), 0.99)[0] == 1.0

    def test_bootstrap_arithmetic(self):
        b = random_batch(np.random.default_rng(0), 1)
        b.terminated[:], b.rewards[:] = False, 0.0
        np.testing.assert_allclose(td_target(constant_pair(2.0), b, np.zeros((1, ACT_DIM)), 0.99), [1.98])

    def test_truncation_keeps_bootstrap(self):
        b = random_batch(np.random.default_rng(0), 1)
        b.terminated[:], b.truncated[:], b.rewards[:] = False, True, 0.0
        np.testing.assert_allclose(td_target(constant_pair(2.0), b, np.zeros((1, ACT_DIM)), 0.5), [1.0])

    def test_fixed_point(self):
        q = np.array([0.3, -1.2, 4.0])
        val, dq = td_term(q, q.copy())
        assert val == 0.0 and not dq.any()

    def test_fixed_point_through_networks(self):
        b = random_batch(np.random.default_rng(0), 4)
        b.terminated[:], b.rewards[:] = False, 0.0
        pair = constant_pair(0.0)
        loss = td_loss(pair, b, UniformPolicy(ACT_DIM), np.random.default_rng(0))
        assert loss.value == 0.0 and all(g.global_norm == 0.0 for g in loss.grads)

    def test_non_finite_target(self):
        b = random_batch(np.random.default_rng(0), 2)
        b.rewards[0] = np.nan
        with pytest.raises(NonFiniteError):
            td_target(constant_pair(1.0), b, np.zeros((2, ACT_DIM)), 0.99)

    def test_empty_batch(self):
        _, critics, policy, b = random_setup(0)
        with pytest.raises(BatchError):
            td_loss(critics, random_batch(np.random.default_rng(0), 0), policy, np.random.default_rng(0))


class TestCqlTerm:
    def test_constant_q_mean_policy_is_zero(self):
        q = np.full(4, 2.5)
        val, gap, *_ = cql_term(q, np.full((3, 4), 2.5), np.zeros((3, 4)), np.zeros((0, 4)), 0.0, 1.0, "mean-policy")
        assert val == 0.0 and gap == 0.0

    def test_constant_q_logsumexp_is_density_offset(self):
        # every entry is c plus a known correction, so the estimator offset has a closed form
        c, k, d_log = 2.5, 3, 2 * math.log(0.5)
        logp = np.full((k, 4), -0.7)
        val, gap, *_ = cql_term(np.full(4, c), np.full((k, 4), c), logp, np.full((k, 4), c), d_log, 1.0)
        expect = math.log(k * math.exp(-d_log) + k * math.exp(0.7))
        assert gap == pytest.approx(expect, rel=1e-12)

    def test_policy_one_above_mean_policy(self):
        val, *_ = cql_term(np.zeros(5), np.ones((10, 5)), np.zeros((10, 5)), np.zeros((0, 5)), 0.0, 1.0,
                           "mean-policy")
        assert val == pytest.approx(1.0)

    def test_policy_one_above_logsumexp(self):
        # 10 policy + 10 random samples all at Q=1, no density terms: 1 + log 20
        val, *_ = cql_term(np.zeros(5), np.ones((10, 5)), np.zeros((10, 5)), np.ones((10, 5)), 0.0, 1.0)
        assert val == pytest.approx(1.0 + math.log(20.0), rel=1e-12)

    def test_alpha_scales(self):
        args = (np.zeros(3), np.ones((2, 3)), np.zeros((2, 3)), np.ones((2, 3)), 0.0)
        assert cql_term(*args, 3.0)[0] == pytest.approx(3.0 * cql_term(*args, 1.0)[0])

    def test_calql_clamp_to_refval(self):
        val, *_ = cql_term(np.zeros(4), np.full((3, 4), -5.0), np.zeros((3, 4)), np.zeros((0, 4)), 0.0, 1.0,
                           "mean-policy", floor=np.zeros(4))
        assert val == 0.0

    def test_calql_inactive_floor_equals_cql(self):
        rng = np.random.default_rng(0)
        qd, qp, lp, qr = rng.normal(size=4), rng.normal(size=(3, 4)) + 10, rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        a = cql_term(qd, qp, lp, qr, -1.0, 2.0)
        b = cql_term(qd, qp, lp, qr, -1.0, 2.0, floor=np.full(4, -3.0))
        assert a[0] == b[0]
        for x, y in zip(a[2:], b[2:]):
            np.testing.assert_array_equal(x, y)

    @pytest.mark.parametrize("estimator", ["logsumexp", "mean-policy"])
    def test_calql_half_clamped_between_bounds(self, estimator):
        qd = np.zeros(4)
        qp = np.array([[-2.0, -2.0, 3.0, 3.0]] * 3)
        lp, qr = np.zeros((3, 4)), np.zeros((3, 4))
        floor_half = np.array([1.0, 1.0, -9.0, -9.0])
        cql = cql_term(qd, qp, lp, qr, 0.0, 1.0, estimator)[0]
        half = cql_term(qd, qp, lp, qr, 0.0, 1.0, estimator, floor=floor_half)[0]
        full = cql_term(qd, qp, lp, qr, 0.0, 1.0, estimator, floor=np.full(4, 5.0))[0]
        assert cql < half < full

    def test_calql_gating_zero_gradient(self):
        rng = np.random.default_rng(1)
        floor = np.full(6, 2.0)
        qp = rng.uniform(-3, 1.9, size=(4, 6))
        _, _, _, dq_pi, dq_rand = cql_term(rng.normal(size=6), qp, rng.normal(size=(4, 6)), rng.normal(size=(4, 6)),
                                           -1.4, 5.0, floor=floor)
        assert not dq_pi.any()
        assert dq_rand.sum() > 0


class TestNegatives:
    def test_zero_sigma(self):
        a = np.random.default_rng(0).uniform(-1, 1, (5, 2))
        neg = make_negatives(a, 0.0, np.random.default_rng(1))
        np.testing.assert_array_equal(neg.noisy, a)
        np.testing.assert_array_equal(neg.very_noisy, a)

    def test_batch_of_two_swaps(self):
        a = np.array([[0.1, 0.2], [-0.3, 0.4]])
        np.testing.assert_array_equal(make_negatives(a, 0.1, np.random.default_rng(0)).permuted, a[::-1])

    @given(st.integers(2, 40), st.integers(0, 1000))
    def test_permutation_fixed_point_free(self, n, seed):
        a = np.random.default_rng(seed).uniform(-1, 1, (n, 2))
        p = make_negatives(a, 0.1, np.random.default_rng(seed)).permuted
        assert not np.any(np.all(p == a, axis=1))
        np.testing.assert_array_equal(np.sort(p, axis=0), np.sort(a, axis=0))

    def test_noise_scale(self):
        a = np.zeros((100_000, 2))
        neg = make_negatives(a, 0.15, np.random.default_rng(0))
        assert abs((neg.noisy - a).std() / 0.15 - 1.0) < 0.01

    def test_shared_eps_bitwise(self):
        a = np.random.default_rng(0).uniform(-1, 1, (64, 3))
        neg = make_negatives(a, 0.15, np.random.default_rng(2))
        np.testing.assert_array_equal(neg.noisy, a + neg.delta)
        np.testing.assert_array_equal(neg.very_noisy, a + 2.0 * neg.delta)
        np.testing.assert_array_equal(2.0 * neg.delta, neg.delta + neg.delta)

    def test_random_in_bounds(self):
        neg = make_negatives(np.zeros((1000, 2)), 0.15, np.random.default_rng(0))
        assert np.all(np.abs(neg.random) <= 1.0)

    def test_empty(self):
        with pytest.raises(BatchError):
            make_negatives(np.zeros((0, 2)), 0.1, np.random.default_rng(0))


class TestRankTerms:
    def test_rank_fn_values(self):
        assert rank_fn(0.3, 0.3) == pytest.approx(LN2)
        assert rank_fn(0.0, 1.0) == pytest.approx(1.3132616875182228, rel=1e-15)
        assert rank_fn(800.0, 0.0) == 0.0
        assert np.isfinite(rank_fn(-800.0, 0.0))

    def test_equal_q_success_row(self):
        val, _, parts = rank_term(q_dict(1, 1, 1, 1, 1), np.array([True]), CriticObjectiveConfig(kind="rankq"))
        assert val == pytest.approx(6 * LN2, rel=1e-14)
        assert parts["succ"] == pytest.approx(4 * LN2) and parts["chain"] == pytest.approx(2 * LN2)

    def test_equal_q_failure_row(self):
        val, _, parts = rank_term(q_dict(1, 1, 1, 1, 1), np.array([False]), CriticObjectiveConfig(kind="rankq"))
        assert val == pytest.approx(LN2, rel=1e-14) and parts["fail"] == val

    def test_hand_example(self):
        val, _, parts = rank_term(q_dict(2, 1, 0.5, -1, 0), np.array([True]), CriticObjectiveConfig(kind="rankq"))
        # high-precision evaluation of the softplus sums
        assert parts["succ"] == pytest.approx(0.6901903281176898, abs=1e-12)
        assert parts["chain"] == pytest.approx(0.6754902621628591, abs=1e-12)
        assert val == pytest.approx(1.3656805902805489, abs=1e-12)

    def test_batch_mean_normalisation(self):
        cfg = CriticObjectiveConfig(kind="rankq")
        val, *_ = rank_term(q_dict([1, 1], [1, 1], [1, 1], [1, 1], [1, 1]), np.array([True, False]), cfg)
        assert val == pytest.approx((6 * LN2 + LN2) / 2)

    def test_weights(self):
        cfg = CriticObjectiveConfig(kind="rankq", alpha0=20.0, alpha1=3.0)
        val, *_ = rank_term(q_dict([1, 1], [1, 1], [1, 1], [1, 1], [1, 1]), np.array([True, False]), cfg)
        assert val == pytest.approx((20 * 6 * LN2 + 3 * LN2) / 2)

    @pytest.mark.parametrize("flag,pairs", [("no_chain", 4), ("no_permuted", 5)])
    def test_ablations_drop_pairs(self, flag, pairs):
        cfg = CriticObjectiveConfig(kind="rankq", **{flag: True})
        val, *_ = rank_term(q_dict(0, 0, 0, 0, 0), np.array([True]), cfg)
        assert val == pytest.approx(pairs * LN2)

    def test_double_sigma(self):
        assert CriticObjectiveConfig(kind="rankq", double_sigma=True).effective_sigma == pytest.approx(0.30)

    def test_fail_pair_variant(self):
        q = q_dict(0, 5, 0, -5, 0)
        eq = rank_term(q, np.array([False]), CriticObjectiveConfig(kind="rankq"))[0]
        pc = rank_term(q, np.array([False]), CriticObjectiveConfig(kind="rankq", fail_pair="noisy"))[0]
        assert eq == pytest.approx(math.log1p(math.exp(-5)))
        assert pc == pytest.approx(math.log1p(math.exp(5)))

    @given(st.lists(st.floats(-20, 20), min_size=5, max_size=5), st.booleans())
    def test_gradient_direction(self, qs, succ):
        _, dq, _ = rank_term(q_dict(*qs), np.array([succ]), CriticObjectiveConfig(kind="rankq"))
        assert dq["a"][0] <= 0.0 and dq["random"][0] >= 0.0


class TestLossesOverNetworks:
    @pytest.mark.parametrize("kind,kw", [
        ("td", {}), ("cql", {}), ("cql", {"use_lagrange": True}), ("cql", {"cql_estimator": "mean-policy"}),
        ("calql", {}), ("calql", {"cql_estimator": "mean-policy"}), ("rankq", {}),
        ("rankq", {"alpha0": 20.0, "no_permuted": True}), ("rankq", {"fail_pair": "noisy", "no_chain": True}),
    ])
    def test_finite_differences(self, kind, kw):
        for seed in range(2):
            assert critic_fd_error(kind, seed, **kw) < 1e-6

    def test_call_budget(self):
        rng, critics, policy, batch = random_setup(3)
        for cfg, expect in [(CriticObjectiveConfig(kind="cql"), 20), (CriticObjectiveConfig(kind="calql"), 20),
                            (CriticObjectiveConfig(kind="rankq"), 4),
                            (CriticObjectiveConfig(kind="rankq", no_permuted=True), 3),
                            (CriticObjectiveConfig(kind="td"), 0)]:
            before = critics.extra_calls
            critic_loss(critics, batch, policy, cfg, rng)
            assert critics.extra_calls - before == expect

    def test_calql_needs_refvals(self):
        rng, critics, policy, batch = random_setup(0)
        with pytest.raises(BatchError):
            calql_regularizer(critics, batch, policy, None, CriticObjectiveConfig(kind="calql"), rng)
        bad = batch.rtg.copy()
        bad[0] = np.nan
        with pytest.raises(BatchError):
            calql_regularizer(critics, batch, policy, bad, CriticObjectiveConfig(kind="calql"), rng)

    def test_config_errors_listed(self):
        cfg = CriticObjectiveConfig(kind="cql", alpha=0.0, sigma=-1.0, n_policy_actions=0)
        errs = cfg.errors()
        assert len(errs) == 3
        with pytest.raises(ConfigError):
            cql_regularizer(*random_setup(0)[1:3], random_batch(np.random.default_rng(0)), cfg,
                            np.random.default_rng(0))

    def test_rankq_terms_logged(self):
        rng, critics, policy, batch = random_setup(1)
        loss = rankq_loss(critics, batch, policy, CriticObjectiveConfig(kind="rankq"), rng)
        t = loss.terms
        assert t["rank"] == pytest.approx(t["succ"] + t["chain"] + t["fail"])
        assert loss.value == pytest.approx(t["td"] + t["rank"])

    def test_deterministic_given_rng(self):
        _, critics, policy, batch = random_setup(2)
        cfg = CriticObjectiveConfig(kind="cql")
        a = critic_loss(critics, batch, policy, cfg, np.random.default_rng(5))
        b = critic_loss(critics, batch, policy, cfg, np.random.default_rng(5))
        assert a.value == b.value and a.grads[0].flat().tobytes() == b.grads[0].flat().tobytes()


class TestPessimism:
    def test_single_step_reduces_gap(self):
        rng, critics, policy, batch = random_setup(4, hidden=(16, 16))
        opts = [Adam(q, 1e-4) for q in critics.q]
        g0 = regularizer_step(critics, batch, policy, np.random.default_rng(0), opts)
        g1 = regularizer_step(critics, batch, policy, np.random.default_rng(0), [Adam(q, 1e-4) for q in critics.q])
        assert all(b < a for a, b in zip(g0, g1))

    def test_regularizer_alone_drives_gap_negative(self):
        rng, critics, policy, batch = random_setup(5, hidden=(32, 32))
        opts = [Adam(q, 1e-3) for q in critics.q]
        for step in range(200):
            regularizer_step(critics, batch, policy, np.random.default_rng(step), opts)
        assert plain_gap(critics, batch, policy, np.random.default_rng(999), k=50) < 0.0

    def test_lagrange_moves_toward_target(self):
        lag = LagrangeMultiplier(lr=0.05)
        for _ in range(20):
            lag.update([2.0, 2.0], target_gap=0.8)   # gap above target: multiplier grows
        assert lag.value > 1.0
        lag2 = LagrangeMultiplier(lr=0.05)
        for _ in range(20):
            lag2.update([0.0, 0.0], target_gap=0.8)
        assert lag2.value < 1.0


class TestPolyak:
    def test_hard_copy(self):
        pair = CriticPair(2, 2, (4,), np.random.default_rng(0))
        pair.q[0].set_flat(np.ones(pair.q[0].num_params))
        polyak_update(pair, 1.0)
        np.testing.assert_array_equal(pair.targets[0].get_flat(), 1.0)

    def test_small_tau(self):
        pair = constant_pair(0.0)
        for net in pair.targets:
            net.set_flat(np.zeros(net.num_params))
        for net in pair.q:
            net.set_flat(np.ones(net.num_params))
        polyak_update(pair, 0.005)
        np.testing.assert_allclose(pair.targets[1].get_flat(), 0.005)

    def test_geometric_halving(self):
        pair = constant_pair(0.0)
        for net in pair.targets:
            net.set_flat(np.zeros(net.num_params))
        for net in pair.q:
            net.set_flat(np.ones(net.num_params))
        tau = 0.005
        steps = int(round(math.log(2) / tau))
        for _ in range(steps):
            polyak_update(pair, tau)
        gap = 1.0 - pair.targets[0].get_flat()[0]
        assert gap == pytest.approx((1 - tau) ** steps, rel=1e-10)
        assert abs(gap - 0.5) < 0.01
