import numpy as np
import pytest

from cbwk.core import (
    EnvState,
    History,
    RoundOutcome,
    make_rng_streams,
    play_round,
    sample_context,
    validate_spec,
)
from cbwk.errors import MissingDistribution
from cbwk.lp import build_lp, solve_lp
from cbwk.policy_conversion import (
    LogisticLpPolicy,
    conservative_budget_empirical,
    conservative_budget_known,
    regret,
    sample_from_pi,
)
from tests.conftest import tiny_spec_doc


class TestWorkingBudgets:
    def test_known_nu_value(self):
        # frozen from arbitrary-precision evaluation of the formula
        assert conservative_budget_known(1000.0, 10000, 2, 0.05) \
            == pytest.approx(679.4038978507795, abs=1e-9)

    def test_zero_horizon(self):
        assert conservative_budget_known(50.0, 0, 3, 0.1) == pytest.approx(48.0)

    def test_increasing_in_delta(self):
        lo = conservative_budget_known(100.0, 500, 2, 0.01)
        hi = conservative_budget_known(100.0, 500, 2, 0.2)
        assert hi > lo

    def test_empirical_nu_value(self):
        # frozen from arbitrary-precision evaluation
        assert conservative_budget_empirical(500.0, 100, 1, 0.5, 1) \
            == pytest.approx(442.9902925445781, abs=1e-9)

    def test_empirical_decreases_in_contexts(self):
        few = conservative_budget_empirical(500.0, 100, 1, 0.5, 2)
        many = conservative_budget_empirical(500.0, 100, 1, 0.5, 10)
        assert many < few

    def test_known_at_least_empirical(self):
        for T in (10, 100, 1000):
            known = conservative_budget_known(300.0, T, 2, 0.1)
            emp = conservative_budget_empirical(300.0, T, 2, 0.1, 4)
            assert known >= emp


class TestNuHat:
    def test_counts_to_frequencies(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="empirical", warm_start=0)
        for x in (0, 0, 1):
            pol.observe_context(x)
        np.testing.assert_allclose(pol.nu_hat, [2 / 3, 1 / 3])

    def test_first_observation_is_dirac(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="empirical", warm_start=0)
        pol.observe_context(1)
        np.testing.assert_allclose(pol.nu_hat, [0.0, 1.0])

    def test_always_sums_to_one(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="empirical", warm_start=0)
        rng = np.random.default_rng(0)
        for _ in range(37):
            pol.observe_context(int(rng.integers(0, 2)))
            assert pol.nu_hat.sum() == pytest.approx(1.0)

    def test_known_mode_requires_weights(self):
        doc = tiny_spec_doc()
        del doc["context_weights"]
        spec = validate_spec(doc)
        with pytest.raises(MissingDistribution):
            LogisticLpPolicy(spec, nu_mode="known")
        LogisticLpPolicy(spec, nu_mode="empirical")  # fine


class TestSampler:
    def test_dirac_column(self):
        rng = np.random.default_rng(0)
        pi = np.array([0.0, 0.0, 1.0])
        assert all(sample_from_pi(pi, rng) == 2 for _ in range(50))

    def test_respects_distribution(self):
        rng = np.random.default_rng(1)
        pi = np.array([0.2, 0.5, 0.3])
        draws = np.array([sample_from_pi(pi, rng) for _ in range(30_000)])
        freq = np.bincount(draws, minlength=3) / len(draws)
        np.testing.assert_allclose(freq, pi, atol=0.02)


class TestActPhases:
    def test_phase0_latch_triggers_and_sticks(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="known",
                               working_budget="full", warm_start=0)
        pol.cum_cost = np.array([tiny_spec.budget - 0.5, 0.0])
        rng = np.random.default_rng(0)
        assert pol.act(0, rng) == tiny_spec.null_action
        assert pol.locked
        # stays locked even after costs would no longer trigger
        pol.cum_cost = np.zeros(2)
        assert pol.act(1, rng) == tiny_spec.null_action

    def test_degenerate_working_budget_plays_null(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="known",
                               working_budget=-3.0, warm_start=0)
        rng = np.random.default_rng(0)
        for x in (0, 1, 0):
            assert pol.act(x, rng) == tiny_spec.null_action

    def test_round_one_plays_non_null(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="known",
                               working_budget="full", warm_start=0)
        a = pol.act(0, np.random.default_rng(0))
        assert a != tiny_spec.null_action

    def test_warm_start_uniform_non_null(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="known",
                               working_budget="full", warm_start=10)
        rng = np.random.default_rng(3)
        seen = set()
        for t in range(10):
            a = pol.act(0, rng)
            seen.add(a)
            pol.record(RoundOutcome(t + 1, 0, a, 0, 0.0, np.zeros(2)))
        assert tiny_spec.null_action not in seen
        assert len(seen) == 2

    def test_dirac_lp_solution_returned_surely(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="known",
                               working_budget="full", warm_start=1,
                               explore_scale=0.0,
                               oracle_theta=np.array([0.5, -0.3]))
        rng = np.random.default_rng(4)
        pol.record(RoundOutcome(1, 0, 1, 1, 0.8, np.array([0.0, 0.0])))
        # rig a spec whose LP is unconstrained: best action is deterministic
        pol.working_budget = 1e9
        a = pol.act(0, rng)
        assert pol.phase2_engaged
        # with a huge budget the program picks the argmax of reward * P per context
        from cbwk.core import sigmoid
        p = sigmoid(tiny_spec.transfer @ np.array([0.5, -0.3]))
        gains = tiny_spec.reward * p
        assert a == int(np.argmax(gains[:, 0]))


class TestRecord:
    def test_cost_accumulates_exactly(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="known", warm_start=0)
        pol.record(RoundOutcome(1, 0, 1, 1, 0.8, np.array([0.3, 0.1])))
        np.testing.assert_allclose(pol.cum_cost, [0.3, 0.1])
        assert pol.state.obs_count == 1

    def test_no_conversion_leaves_cost(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="known", warm_start=0)
        pol.record(RoundOutcome(1, 0, 1, 0, 0.0, np.zeros(2)))
        np.testing.assert_allclose(pol.cum_cost, [0.0, 0.0])
        assert pol.state.obs_count == 1  # design still updated

    def test_null_action_skips_design(self, tiny_spec):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="known", warm_start=0)
        V = pol.state.V.copy()
        pol.record(RoundOutcome(1, 0, tiny_spec.null_action, 0, 0.0,
                                np.zeros(2)))
        np.testing.assert_array_equal(pol.state.V, V)
        assert pol.state.obs_count == 0


class TestRegret:
    def test_zero_reward_gives_opt(self):
        h = History(1)
        assert regret(h, 12.5) == 12.5

    def test_zero_opt_nonpositive(self):
        h = History(1)
        h.append(RoundOutcome(1, 0, 1, 1, 0.6, np.zeros(1)))
        assert regret(h, 0.0) == -0.6


def run_policy(spec, theta, policy, seed, horizon=None):
    ctx, conv, pol_rng = make_rng_streams(seed)
    env = EnvState(theta, seed)
    h = History(spec.d)
    for _ in range(horizon or spec.horizon):
        x = sample_context(spec, ctx)
        a = policy.act(x, pol_rng)
        out = play_round(env, spec, h, x, a, conv)
        policy.record(out)
    return h


class TestEndToEnd:
    def test_hard_budget_always(self, tiny_spec, tiny_theta):
        for seed in range(8):
            pol = LogisticLpPolicy(tiny_spec, nu_mode="empirical",
                                   working_budget="full", warm_start=3,
                                   lam=0.5, explore_scale=0.3,
                                   bonus_form="log", kappa=1.0)
            h = run_policy(tiny_spec, tiny_theta, pol, seed)
            assert np.all(h.cumulative_cost <= tiny_spec.budget)

    def test_phase2_marginal_feasibility(self, tiny_spec, tiny_theta):
        # every solved program respects the working budget in expectation
        pol = LogisticLpPolicy(tiny_spec, nu_mode="known",
                               working_budget="full", warm_start=2,
                               lam=0.5, explore_scale=0.2, bonus_form="log",
                               kappa=1.0)
        ctx, conv, pol_rng = make_rng_streams(5)
        env = EnvState(tiny_theta, 5)
        h = History(2)
        for _ in range(tiny_spec.horizon):
            x = sample_context(tiny_spec, ctx)
            a = pol.act(x, pol_rng)
            if pol.phase2_engaged:
                pi = pol._lp_cache_pi
                # recompute the spend under the actual upper bounds used
                p_hat, eps = pol._phase1(pol.state.round + 1)
                upper = np.minimum(p_hat + eps, 1.0)
                rates = tiny_spec.cost * upper[:, :, None]
                spend = (rates * pi[:, :, None]
                         * tiny_spec.context_weights[None, :, None]
                         ).sum(axis=(0, 1)) * tiny_spec.horizon
                assert np.all(spend <= pol.working_budget + 1e-8)
            out = play_round(env, tiny_spec, h, x, a, conv)
            pol.record(out)

    def test_theory_budget_degenerates_to_null_when_small(self, tiny_spec,
                                                          tiny_theta):
        # B=6, T=40 makes the conservative budget negative -> all-null run
        pol = LogisticLpPolicy(tiny_spec, nu_mode="known",
                               working_budget="theory", warm_start=0)
        assert pol.working_budget <= 0
        h = run_policy(tiny_spec, tiny_theta, pol, 0)
        assert h.cumulative_reward == 0.0
        assert not h.cumulative_cost.any()

    def test_lp_failure_falls_back_to_null(self, tiny_spec, monkeypatch):
        from cbwk import policy_conversion
        from cbwk.errors import NumericalInstability

        def boom(lp):
            raise NumericalInstability("forced")

        pol = LogisticLpPolicy(tiny_spec, nu_mode="known",
                               working_budget="full", warm_start=1)
        pol.record(RoundOutcome(1, 0, 1, 1, 0.8, np.zeros(2)))
        monkeypatch.setattr(policy_conversion, "solve_lp", boom)
        a = pol.act(0, np.random.default_rng(0))
        assert a == tiny_spec.null_action
        assert pol.lp_fallbacks == 1

    def test_kkt_certified_on_every_solve_in_debug_mode(self, tiny_spec,
                                                        tiny_theta):
        pol = LogisticLpPolicy(tiny_spec, nu_mode="empirical",
                               working_budget="full", warm_start=3,
                               lam=0.5, explore_scale=0.2, bonus_form="log",
                               kappa=1.0, lp_debug=True)
        run_policy(tiny_spec, tiny_theta, pol, 11)
        assert pol.kkt_failures == 0

    def test_oracle_mode_tracks_static_optimum(self, tiny_spec, tiny_theta):
        from cbwk.core import sigmoid
        p = sigmoid(tiny_spec.transfer @ tiny_theta)
        p[0] = 0.0
        lp = build_lp(tiny_spec.context_weights, tiny_spec.reward * p,
                      tiny_spec.cost * p[:, :, None], tiny_spec.budget,
                      tiny_spec.horizon, tiny_spec.null_action)
        opt = solve_lp(lp).value
        per_run = []
        for seed in range(30):
            pol = LogisticLpPolicy(tiny_spec, nu_mode="known",
                                   working_budget="full", warm_start=0,
                                   explore_scale=0.0, kappa=1.0, lam=1.0,
                                   oracle_theta=tiny_theta)
            ctx, conv, pol_rng = make_rng_streams(seed + 100)
            env = EnvState(tiny_theta, seed)
            h = History(2)
            got, n = 0.0, 0
            for _ in range(tiny_spec.horizon):
                x = sample_context(tiny_spec, ctx)
                a = pol.act(x, pol_rng)
                if pol.phase2_engaged:
                    n += 1
                    got += tiny_spec.reward[a, x] * p[a, x]
                out = play_round(env, tiny_spec, h, x, a, conv)
                pol.record(out)
            per_run.append(got / n)
        mean = np.mean(per_run)
        se = np.std(per_run, ddof=1) / np.sqrt(len(per_run))
        assert abs(mean - opt / tiny_spec.horizon) <= 3 * se + 1e-12
