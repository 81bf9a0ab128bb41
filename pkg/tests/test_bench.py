import json
import os

import numpy as np
import pytest

from cbwk import bench
from cbwk.core import sigmoid
from cbwk.errors import (
    CoefficientMismatch,
    EmptyAfterFiltering,
    SchemaError,
)


@pytest.fixture(scope="module")
def desk_instance():
    cfg = bench.LoanInstanceConfig(horizon=300, budget=9.6)
    return bench.gen_loan_instance(cfg)


class TestGenLoanInstance:
    def test_action_set(self, desk_instance):
        spec = desk_instance.spec
        assert spec.n_actions == 6
        assert spec.actions[spec.null_action] == "null"

    def test_reward_is_normalized_amount(self):
        cfg = bench.LoanInstanceConfig(
            amount_levels=(10_000.0, 20_000.0, 36_000.0, 50_000.0, 77_000.0))
        inst = bench.gen_loan_instance(cfg)
        spec = inst.spec
        # a context at amount level 4 carries amount 50000 -> reward 0.5
        ids = [i for i, ctx in enumerate(spec.contexts) if ctx[1] == 4]
        for a in spec.nonnull_actions():
            for x in ids:
                assert spec.reward[a, x] == pytest.approx(0.5)

    def test_hand_computed_probability(self):
        # risk 3, amount 1, age 5, education 4, marital 2, rate 0.05, a=0.2:
        # score = 0.8177 - 13.1101*0.04 + 0.0515 + 0.7093 + 0.2592
        #         - 0.1084 + 0.0102 = 1.215096
        cfg = bench.LoanInstanceConfig(
            active_features=("risk", "amount", "age", "education", "marital"),
            stdir_levels=(0.010, 0.020, 0.05, 0.060, 0.120),
        )
        inst = bench.gen_loan_instance(cfg)
        levels = {"risk": 3, "amount": 1, "age": 5, "education": 4, "marital": 2}
        p = inst.conversion_probability(levels, 0.2)
        score = 0.8177 - 13.1101 * 0.04 + 0.0515 + 0.7093 + 0.2592 \
            - 0.1084 + 0.0102
        assert score == pytest.approx(1.215096, abs=1e-9)
        assert p == pytest.approx(sigmoid(score), abs=1e-12)
        assert p == pytest.approx(0.7712, abs=1e-4)
        # the normalized instance reproduces the same probability exactly
        combos, _ = bench._context_grid(cfg)
        xid = combos.index([3, 1, 5, 4, 2])
        aid = inst.spec.actions.index("disc_0.2")
        via_spec = sigmoid(inst.spec.transfer[aid, xid] @ inst.theta_star)
        assert via_spec == pytest.approx(p, abs=1e-12)

    def test_feature_norms_bounded(self, desk_instance):
        norms = np.linalg.norm(desk_instance.spec.transfer, axis=2)
        assert norms.max() <= 1.0 + 1e-12
        ext = np.linalg.norm(desk_instance.features_extended, axis=2)
        assert ext.max() <= 1.0 + 1e-12

    def test_weights_are_uniform_product(self, desk_instance):
        w = desk_instance.spec.context_weights
        assert w.shape == (25,)
        np.testing.assert_allclose(w, 1.0 / 25.0)

    def test_coefficient_mismatch(self):
        cfg = bench.LoanInstanceConfig(stdir_levels=(0.01, 0.05))
        with pytest.raises(CoefficientMismatch):
            bench.gen_loan_instance(cfg)
        cfg = bench.LoanInstanceConfig(
            marginals={"risk": [0.5, 0.5]})
        with pytest.raises(CoefficientMismatch):
            bench.gen_loan_instance(cfg)

    def test_no_discount_rate_near_half(self, desk_instance):
        rng = np.random.default_rng(0)
        rate = bench.no_discount_conversion_rate(desk_instance, 100_000, rng)
        assert 0.45 <= rate <= 0.55

    def test_no_discount_rate_full_grid(self):
        cfg = bench.LoanInstanceConfig(
            active_features=("risk", "amount", "age", "education", "marital"))
        inst = bench.gen_loan_instance(cfg)
        rng = np.random.default_rng(1)
        rate = bench.no_discount_conversion_rate(inst, 100_000, rng)
        assert 0.45 <= rate <= 0.55

    def test_extended_features_linearize_tables(self, desk_instance):
        # reward and the rate-loss cost are exact linear functions of the
        # extended features: one common rescaling recovers the tables
        spec = desk_instance.spec
        ext = desk_instance.features_extended
        for a in spec.nonnull_actions():
            for x in range(spec.n_contexts):
                vec = ext[a, x]
                assert vec[-2] > 0
                ratio = spec.reward[a, x] / vec[-2]
                assert spec.cost[a, x, 1] == pytest.approx(vec[-1] * ratio)
                assert spec.cost[a, x, 0] * desk_instance.config.discount_norm \
                    == pytest.approx(vec[-3] * ratio)


class TestIngestCsv:
    def write_csv(self, tmp_path, rows, header="risk,amount,rate,amt_usd"):
        path = tmp_path / "clients.csv"
        path.write_text("\n".join([header] + rows) + "\n")
        return path

    def schema(self):
        return {
            "columns": {"risk": "risk", "amount": "amount"},
            "rate_column": "rate",
            "amount_column": "amt_usd",
            "rate_amount_cap": 10_000.0,
        }

    def test_toy_frequencies(self, tmp_path):
        cfg = bench.LoanInstanceConfig()
        path = self.write_csv(tmp_path, [
            "1,2,0.05,20000", "1,2,0.05,20000", "3,4,0.02,40000"])
        res = bench.ingest_csv(path, self.schema(), cfg)
        assert res.n_accepted == 3
        combos, _ = bench._context_grid(cfg)
        i12 = combos.index([1, 2])
        i34 = combos.index([3, 4])
        assert res.nu_hat[i12] == pytest.approx(2 / 3)
        assert res.nu_hat[i34] == pytest.approx(1 / 3)

    def test_missing_column(self, tmp_path):
        cfg = bench.LoanInstanceConfig()
        path = self.write_csv(tmp_path, ["1,2,0.05,20000"], header="risk,rate,amt_usd")
        with pytest.raises(SchemaError):
            bench.ingest_csv(path, self.schema(), cfg)

    def test_outlier_filtered_and_counted(self, tmp_path):
        cfg = bench.LoanInstanceConfig()
        path = self.write_csv(tmp_path, [
            "1,2,0.05,20000",
            "2,5,0.15,90000",   # 13500 > 10000 cap -> outlier
        ])
        res = bench.ingest_csv(path, self.schema(), cfg)
        assert res.n_accepted == 1
        assert res.rejected["outlier"] == 1

    def test_bad_level_rejected(self, tmp_path):
        cfg = bench.LoanInstanceConfig()
        path = self.write_csv(tmp_path, ["9,2,0.05,20000", "1,1,0.01,5000"])
        res = bench.ingest_csv(path, self.schema(), cfg)
        assert res.rejected["bad_level"] == 1
        assert res.n_accepted == 1

    def test_empty_after_filtering(self, tmp_path):
        cfg = bench.LoanInstanceConfig()
        path = self.write_csv(tmp_path, ["2,5,0.15,90000"])
        with pytest.raises(EmptyAfterFiltering):
            bench.ingest_csv(path, self.schema(), cfg)


class TestRunExperiment:
    def test_single_round_single_seed(self):
        cfg = bench.LoanInstanceConfig(horizon=1, budget=1.0)
        inst = bench.gen_loan_instance(cfg)
        pc = {"policy": "box-b", "nu_mode": "empirical",
              "working_budget": "full", "warm_start": 0, "lambda": 1.0}
        res = bench.run_experiment(inst.spec, inst.theta_star, pc, seeds=[7])
        assert len(res.runs) == 1
        assert len(res.runs[0].history) == 1

    def test_deterministic_replay(self, desk_instance):
        pc = {"policy": "box-b", "nu_mode": "empirical",
              "working_budget": "full", "warm_start": 5, "lambda": 0.05,
              "explore_scale": 0.1, "bonus_form": "log", "kappa": 1.0}
        a = bench.run_experiment(desk_instance.spec, desk_instance.theta_star,
                                 pc, seeds=[3])
        b = bench.run_experiment(desk_instance.spec, desk_instance.theta_star,
                                 pc, seeds=[3])
        assert a.runs[0].csv_text == b.runs[0].csv_text

    def test_distinct_seeds_distinct_files(self, desk_instance, tmp_path):
        pc = {"policy": "box-b", "nu_mode": "empirical",
              "working_budget": "full", "warm_start": 5, "lambda": 0.05,
              "explore_scale": 0.1, "bonus_form": "log", "kappa": 1.0}
        res = bench.run_experiment(desk_instance.spec, desk_instance.theta_star,
                                   pc, seeds=[1, 2, 3], out_dir=tmp_path,
                                   label="demo")
        files = sorted(os.listdir(tmp_path))
        assert files == ["demo_seed1.csv", "demo_seed2.csv", "demo_seed3.csv"]
        texts = {run.csv_text for run in res.runs}
        assert len(texts) == 3

    def test_hard_budget_and_bonus_bound(self, desk_instance):
        pc = {"policy": "box-b", "nu_mode": "empirical",
              "working_budget": "full", "warm_start": 10, "lambda": 0.0129,
              "explore_scale": 0.1, "bonus_form": "log", "kappa": 1.0}
        res = bench.run_experiment(desk_instance.spec, desk_instance.theta_star,
                                   pc, seeds=[0, 1])
        for run in res.runs:
            assert np.all(run.history.cumulative_cost
                          <= desk_instance.spec.budget)
            assert run.bonus_check["passed"]


class TestAggregate:
    def make_result(self, n_seeds):
        cfg = bench.LoanInstanceConfig(horizon=120, budget=4.0)
        inst = bench.gen_loan_instance(cfg)
        pc = {"policy": "box-b", "nu_mode": "empirical",
              "working_budget": "full", "warm_start": 5, "lambda": 0.05,
              "explore_scale": 0.1, "bonus_form": "log", "kappa": 1.0}
        return inst, bench.run_experiment(inst.spec, inst.theta_star, pc,
                                          seeds=list(range(n_seeds)))

    def test_opt_invariant_across_seeds(self):
        inst, _ = self.make_result(1)
        values = {bench.compute_opt(inst.spec, inst.theta_star)
                  for _ in range(3)}
        assert len(values) == 1

    def test_single_run_has_no_se(self):
        _, res = self.make_result(1)
        summary = bench.aggregate(res)
        assert summary.final_regret_se is None
        assert summary.curves["partial_regret"]["se"] is None

    def test_identical_runs_zero_se(self):
        _, res = self.make_result(2)
        res.runs[1] = res.runs[0]
        summary = bench.aggregate(res)
        assert summary.final_regret_se == pytest.approx(0.0, abs=1e-12)

    def test_regret_curve_starts_near_zero(self):
        _, res = self.make_result(2)
        summary = bench.aggregate(res)
        first = summary.curves["partial_regret"]["mean"][0]
        # at t=1 the partial regret is OPT/T - first-round reward
        assert abs(first) <= summary.opt_value / res.spec.horizon + 1.0

    def test_cost_slack_nonpositive_at_horizon(self):
        _, res = self.make_result(3)
        summary = bench.aggregate(res)
        for i in (1, 2):
            assert summary.curves[f"cost_slack_{i}"]["mean"][-1] <= 0.0

    def test_partial_regret_curve_matches_definition(self):
        _, res = self.make_result(1)
        summary = bench.aggregate(res)
        T = res.spec.horizon
        opt = summary.opt_value
        cum = np.cumsum([rec.reward for rec in res.runs[0].history.records])
        expected = np.arange(1, T + 1) * opt / T - cum
        np.testing.assert_allclose(summary.curves["partial_regret"]["mean"],
                                   expected, atol=1e-12)


class TestEmitPlotData:
    def test_files_and_row_count(self, tmp_path):
        cfg = bench.LoanInstanceConfig(horizon=50, budget=2.0)
        inst = bench.gen_loan_instance(cfg)
        pc = {"policy": "box-b", "nu_mode": "empirical",
              "working_budget": "full", "warm_start": 5, "lambda": 0.05,
              "explore_scale": 0.1, "bonus_form": "log", "kappa": 1.0}
        res = bench.run_experiment(inst.spec, inst.theta_star, pc,
                                   seeds=[0, 1], label="demo")
        summary = bench.aggregate(res)
        paths = bench.emit_plot_data(summary, tmp_path)
        lines = open(paths["curves"]).read().strip().split("\n")
        # header + 3 metrics x 50 rounds
        assert lines[0] == "t,metric,mean,se"
        assert len(lines) == 1 + 3 * 50

    def test_empty_metric_set_gives_header_only_csv(self, tmp_path):
        summary = bench.MetricsSummary(
            label="empty", horizon=0, n_seeds=1, opt_value=0.0, budget=1.0,
            curves={}, final_regret_mean=0.0, final_regret_se=None,
            final_regret_per_seed=[0.0], final_cost_per_seed=[[0.0]],
            lock_rounds=[None], bonus_checks=[])
        paths = bench.emit_plot_data(summary, tmp_path)
        assert open(paths["curves"]).read() == "t,metric,mean,se\n"

    def test_json_round_trip(self, tmp_path):
        cfg = bench.LoanInstanceConfig(horizon=30, budget=2.0)
        inst = bench.gen_loan_instance(cfg)
        pc = {"policy": "box-b", "nu_mode": "empirical",
              "working_budget": "full", "warm_start": 5, "lambda": 0.05,
              "explore_scale": 0.1, "bonus_form": "log", "kappa": 1.0}
        res = bench.run_experiment(inst.spec, inst.theta_star, pc,
                                   seeds=[0], label="demo")
        summary = bench.aggregate(res)
        paths = bench.emit_plot_data(summary, tmp_path)
        doc = json.load(open(paths["summary"]))
        again = json.loads(json.dumps(doc))
        assert again == doc
        assert doc["label"] == "demo"
        assert "final_regret_mean" in doc
        assert doc["bonus_checks"][0]["passed"] is True


class TestMakePolicy:
    def test_unknown_policy_rejected(self, desk_instance):
        with pytest.raises(SchemaError):
            bench.make_policy(desk_instance.spec, {"policy": "box-z"})

    def test_unknown_key_rejected(self, desk_instance):
        with pytest.raises(SchemaError):
            bench.make_policy(desk_instance.spec,
                              {"policy": "box-b", "zeta": 1.0})

    def test_builds_each_policy(self, desk_instance):
        spec = desk_instance.spec
        b = bench.make_policy(spec, {"policy": "box-b", "nu_mode": "empirical",
                                     "lambda": 1.0})
        c = bench.make_policy(spec, {"policy": "box-c", "lambda": 1.0})
        d = bench.make_policy(spec, {"policy": "box-d", "Z": 2.0,
                                     "eta": 0.05, "lambda": 1.0})
        assert b.policy_id == "box-b"
        assert c.policy_id == "box-c"
        assert d.policy_id == "box-d"
