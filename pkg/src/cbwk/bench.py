"""Loan-discount benchmark: instance generation, runs, metrics, emission.

The synthetic instance models discount offers on loans.  A client context is
a combination of categorical levels (risk score, requested-amount band, and
optionally age band, education, marital status); each risk level carries a
representative standard interest rate and each amount band a representative
amount.  Offering discount ``a`` changes the final rate to ``rate * (1 - a)``
and conversion follows a logistic model over an intercept, the final rate,
and per-level coefficients.  Rewards are normalized amounts; costs are the
normalized discount and the normalized rate-times-amount loss.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from cbwk import logistic
from cbwk.core import (
    EnvState,
    History,
    ProblemSpec,
    history_to_csv,
    make_rng_streams,
    play_round,
    sample_context,
    sigmoid,
    validate_spec,
)
from cbwk.errors import (
    CoefficientMismatch,
    EmptyAfterFiltering,
    SchemaError,
)
from cbwk.lp import build_lp, solve_lp
from cbwk.policy_conversion import LogisticLpPolicy, regret
from cbwk.policy_linear import DualGradientPolicy, LinearLpPolicy

__all__ = [
    "LoanInstanceConfig",
    "LoanInstance",
    "gen_loan_instance",
    "ingest_csv",
    "IngestResult",
    "run_experiment",
    "ExperimentResult",
    "RunResult",
    "aggregate",
    "MetricsSummary",
    "emit_plot_data",
    "compute_opt",
    "make_policy",
    "run_benchmark",
]

DEFAULT_LEVEL_COEFS = {
    "risk": [-0.3045, -0.0383, 0.0515, 0.1261, 0.1636],
    "amount": [0.7093, 0.4703, 0.1113, -0.2748, -1.0179],
    "age": [-0.1837, -0.1392, -0.0476, 0.1096, 0.2592],
    "education": [0.1836, 0.0126, -0.0896, -0.1084],
    "marital": [0.0799, 0.0102, -0.0918],
}


@dataclass
class LoanInstanceConfig:
    """Declared parameters of the synthetic loan-discount instance.

    Representative per-level values are declared substitutes for the source
    data: amount bands use band midpoints and risk levels carry fixed rates
    whose uniform average matches the 4.9% mean of the modeled rate.
    """

    discounts: tuple = (0.1, 0.2, 0.35, 0.55, 0.8)
    active_features: tuple = ("risk", "amount")
    level_coefs: dict = field(default_factory=lambda: {
        k: list(v) for k, v in DEFAULT_LEVEL_COEFS.items()})
    intercept: float = 0.8177
    final_rate_slope: float = -13.1101
    marginals: dict | None = None          # feature -> probability list
    amount_levels: tuple = (5_000.0, 15_000.0, 28_000.0, 45_000.0, 77_000.0)
    stdir_levels: tuple = (0.010, 0.020, 0.035, 0.060, 0.120)
    amount_norm: float = 1e5
    discount_norm: float = 7.0
    rate_amount_norm: float = 9_996.0
    horizon: int = 5_000
    budget: float = 160.0
    theta_margin: float = 1.05

    @classmethod
    def from_dict(cls, doc: dict) -> "LoanInstanceConfig":
        kwargs = {}
        for key in doc:
            if key == "kind":
                continue
            if key not in cls.__dataclass_fields__:
                raise SchemaError(f"unknown loan-config field {key!r}")
            kwargs[key] = doc[key]
        cfg = cls(**kwargs)
        if isinstance(cfg.active_features, list):
            cfg.active_features = tuple(cfg.active_features)
        return cfg

    def levels_of(self, feature: str) -> int:
        return len(self.level_coefs[feature])


@dataclass
class LoanInstance:
    """A generated instance: the validated spec plus the hidden parameter."""

    spec: ProblemSpec
    theta_star: np.ndarray
    features_extended: np.ndarray     # features making reward/costs linear
    config: LoanInstanceConfig
    feature_scale: float              # raw-to-unit normalization divisor

    def make_env(self, seed: int) -> EnvState:
        return EnvState(true_theta=self.theta_star, rng_seed=seed)

    def conversion_probability(self, levels: dict, discount: float) -> float:
        """Conversion probability from raw coefficients (normalization-free)."""
        cfg = self.config
        stdir = cfg.stdir_levels[levels["risk"] - 1]
        score = cfg.intercept + cfg.final_rate_slope * stdir * (1.0 - discount)
        for feat in cfg.active_features:
            score += cfg.level_coefs[feat][levels[feat] - 1]
        return float(sigmoid(score))


def _check_config(cfg: LoanInstanceConfig) -> None:
    for feat in cfg.active_features:
        if feat not in cfg.level_coefs:
            raise CoefficientMismatch(f"no coefficients declared for {feat!r}")
    if len(cfg.amount_levels) != cfg.levels_of("amount"):
        raise CoefficientMismatch("amount representatives do not cover the levels")
    if len(cfg.stdir_levels) != cfg.levels_of("risk"):
        raise CoefficientMismatch("rate representatives do not cover the levels")
    if cfg.marginals:
        for feat, probs in cfg.marginals.items():
            if feat not in cfg.level_coefs:
                raise CoefficientMismatch(f"marginals for unknown feature {feat!r}")
            if len(probs) != cfg.levels_of(feat):
                raise CoefficientMismatch(f"marginals for {feat!r} cover the wrong level count")
            if abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
                raise CoefficientMismatch(f"marginals for {feat!r} are not a distribution")


def _context_grid(cfg: LoanInstanceConfig):
    """All level combinations of the active features, mixed-radix order."""
    sizes = [cfg.levels_of(f) for f in cfg.active_features]
    combos = [[]]
    for size in sizes:
        combos = [c + [lvl] for c in combos for lvl in range(1, size + 1)]
    return combos, sizes


def gen_loan_instance(cfg: LoanInstanceConfig,
                      rng: np.random.Generator | None = None) -> LoanInstance:
    """Build the discrete loan instance and its hidden conversion parameter.

    Features and the parameter are jointly rescaled so every feature vector
    has norm at most 1 while all conversion probabilities stay exactly those
    of the raw coefficient table.
    """
    _check_config(cfg)
    combos, sizes = _context_grid(cfg)
    n_x = len(combos)
    actions = ["null"] + [f"disc_{a:g}" for a in cfg.discounts]
    n_a = len(actions)
    risk_pos = cfg.active_features.index("risk") if "risk" in cfg.active_features else None
    amount_pos = cfg.active_features.index("amount") if "amount" in cfg.active_features else None
    if risk_pos is None or amount_pos is None:
        raise CoefficientMismatch("active features must include risk and amount")

    # Raw feature layout: [1, final_rate, one-hot blocks per active feature].
    m_raw = 2 + sum(sizes)
    theta_raw = np.zeros(m_raw)
    theta_raw[0] = cfg.intercept
    theta_raw[1] = cfg.final_rate_slope
    offset = 2
    block_offsets = {}
    for feat, size in zip(cfg.active_features, sizes):
        block_offsets[feat] = offset
        theta_raw[offset:offset + size] = cfg.level_coefs[feat]
        offset += size

    contexts = np.zeros((n_x, len(cfg.active_features) + 2))
    stdir = np.zeros(n_x)
    amount = np.zeros(n_x)
    for i, levels in enumerate(combos):
        stdir[i] = cfg.stdir_levels[levels[risk_pos] - 1]
        amount[i] = cfg.amount_levels[levels[amount_pos] - 1]
        contexts[i] = list(levels) + [stdir[i], amount[i]]

    transfer_raw = np.zeros((n_a, n_x, m_raw))
    ext_raw = np.zeros((n_a, n_x, m_raw + 3))
    reward = np.zeros((n_a, n_x))
    cost = np.zeros((n_a, n_x, 2))
    for ai, a in enumerate(cfg.discounts, start=1):
        for i, levels in enumerate(combos):
            vec = np.zeros(m_raw)
            vec[0] = 1.0
            vec[1] = stdir[i] * (1.0 - a)
            for pos, feat in enumerate(cfg.active_features):
                vec[block_offsets[feat] + levels[pos] - 1] = 1.0
            transfer_raw[ai, i] = vec
            reward[ai, i] = amount[i] / cfg.amount_norm
            cost[ai, i, 0] = a / cfg.discount_norm
            cost[ai, i, 1] = stdir[i] * amount[i] / cfg.rate_amount_norm
            ext_raw[ai, i] = np.concatenate([
                vec, [a, amount[i] / cfg.amount_norm,
                      stdir[i] * amount[i] / cfg.rate_amount_norm]])

    scale = float(np.linalg.norm(transfer_raw[1:], axis=2).max())
    transfer = transfer_raw / scale
    theta_star = theta_raw * scale
    ext_scale = float(np.linalg.norm(ext_raw[1:], axis=2).max())
    features_extended = ext_raw / ext_scale

    weights = np.ones(n_x)
    marginals = cfg.marginals or {}
    for i, levels in enumerate(combos):
        for pos, feat in enumerate(cfg.active_features):
            probs = marginals.get(feat)
            p = probs[levels[pos] - 1] if probs else 1.0 / sizes[pos]
            weights[i] *= p
    weights /= weights.sum()

    doc = {
        "actions": actions,
        "null_action": 0,
        "contexts": contexts.tolist(),
        "transfer": transfer.tolist(),
        "reward": reward.tolist(),
        "cost": cost.tolist(),
        "horizon": cfg.horizon,
        "budget": cfg.budget,
        "theta_bound": float(np.linalg.norm(theta_star) * cfg.theta_margin),
        "context_weights": weights.tolist(),
    }
    spec = validate_spec(doc)
    return LoanInstance(spec=spec, theta_star=theta_star,
                        features_extended=features_extended, config=cfg,
                        feature_scale=scale)


def no_discount_conversion_rate(inst: LoanInstance, n_samples: int,
                                rng: np.random.Generator) -> float:
    """Monte-Carlo average conversion rate when no discount is offered."""
    cfg = inst.config
    combos, _ = _context_grid(cfg)
    ids = rng.choice(len(combos), size=n_samples, p=inst.spec.context_weights)
    total = 0.0
    for i in ids:
        levels = {f: combos[i][p] for p, f in enumerate(cfg.active_features)}
        total += inst.conversion_probability(levels, 0.0)
    return total / n_samples


# -- external data ------------------------------------------------------------


@dataclass
class IngestResult:
    """Rows mapped onto the instance grid plus the empirical distribution."""

    context_ids: list
    nu_hat: np.ndarray
    n_accepted: int
    rejected: dict


def ingest_csv(path, schema_map: dict, cfg: LoanInstanceConfig) -> IngestResult:
    """Map an external CSV of client rows to context ids on the cfg grid.

    ``schema_map['columns']`` names the CSV column carrying each active
    feature's (1-based) level.  Optional ``rate_column``/``amount_column``
    plus ``rate_amount_cap`` reproduce the outlier filter on rate-times-
    amount.  Rows failing level ranges or the cap are rejected and counted.
    """
    columns = schema_map.get("columns")
    if not columns:
        raise SchemaError("schema_map must declare a 'columns' mapping")
    for feat in cfg.active_features:
        if feat not in columns:
            raise SchemaError(f"no column declared for feature {feat!r}")

    combos, sizes = _context_grid(cfg)
    index = {tuple(c): i for i, c in enumerate(combos)}
    rate_col = schema_map.get("rate_column")
    amount_col = schema_map.get("amount_column")
    cap = schema_map.get("rate_amount_cap")

    ids = []
    rejected = {"bad_level": 0, "outlier": 0, "bad_value": 0}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        declared = [columns[f] for f in cfg.active_features]
        if rate_col:
            declared.append(rate_col)
        if amount_col:
            declared.append(amount_col)
        missing = [c for c in declared if c not in header]
        if missing:
            raise SchemaError(f"missing declared columns: {missing}")
        for row in reader:
            try:
                levels = tuple(int(row[columns[f]]) for f in cfg.active_features)
            except (TypeError, ValueError):
                rejected["bad_value"] += 1
                continue
            if any(not 1 <= lvl <= size for lvl, size in zip(levels, sizes)):
                rejected["bad_level"] += 1
                continue
            if cap is not None and rate_col and amount_col:
                try:
                    product = float(row[rate_col]) * float(row[amount_col])
                except (TypeError, ValueError):
                    rejected["bad_value"] += 1
                    continue
                if product > cap:
                    rejected["outlier"] += 1
                    continue
            ids.append(index[levels])

    if not ids:
        raise EmptyAfterFiltering("no rows survived the filters")
    counts = np.bincount(ids, minlength=len(combos)).astype(float)
    return IngestResult(context_ids=ids, nu_hat=counts / counts.sum(),
                        n_accepted=len(ids), rejected=rejected)


# -- running ------------------------------------------------------------------


def compute_opt(spec: ProblemSpec, theta_star: np.ndarray) -> float:
    """Value of the static benchmark program on the true instance."""
    p = sigmoid(spec.transfer @ np.asarray(theta_star, dtype=float))
    p[spec.null_action] = 0.0
    lp = build_lp(spec.context_weights, spec.reward * p,
                  spec.cost * p[:, :, None], spec.budget, spec.horizon,
                  null_action=spec.null_action)
    return solve_lp(lp).value


POLICY_KEYS = {
    "box-b": {"nu_mode", "working_budget", "delta", "lambda", "warm_start",
              "refit_every", "explore_scale", "bonus_form", "kappa",
              "oracle_theta", "lp_debug"},
    "box-c": {"nu_mode", "working_budget", "delta", "lambda", "warm_start",
              "explore_scale", "bonus_form", "feature_table", "theta_bound",
              "oracle_params", "lp_debug"},
    "box-d": {"Z", "eta", "delta", "lambda", "warm_start", "explore_scale",
              "bonus_form", "feature_table", "theta_bound"},
}


def make_policy(spec: ProblemSpec, cfg: dict):
    """Instantiate a policy from a config mapping (key ``policy`` selects)."""
    cfg = dict(cfg)
    policy_id = cfg.pop("policy")
    if policy_id not in POLICY_KEYS:
        raise SchemaError(f"unknown policy {policy_id!r}")
    unknown = set(cfg) - POLICY_KEYS[policy_id]
    if unknown:
        raise SchemaError(f"unknown keys for {policy_id}: {sorted(unknown)}")
    if "lambda" in cfg:
        cfg["lam"] = cfg.pop("lambda")
    if policy_id == "box-b":
        return LogisticLpPolicy(spec, **cfg)
    if policy_id == "box-c":
        return LinearLpPolicy(spec, **cfg)
    return DualGradientPolicy(spec, **cfg)


class BonusSumTracker:
    """Accumulates the theoretical exploration widths along the played path.

    Independent of the policy's own bonus settings: it maintains its own
    design matrix with the canonical regularization and the instance's true
    inverse-slope constant, evaluates the width of the played pair before
    folding it in, and compares twice the running sum against the
    closed-form cap at the horizon.
    """

    def __init__(self, spec: ProblemSpec, delta: float = 0.05):
        self.spec = spec
        self.delta = delta
        lam = spec.m * math.log(1.0 + spec.horizon / spec.m)
        self.state = logistic.LogisticState.create(spec, lam, delta)
        self.eps_sum = 0.0

    def update(self, a: int, x: int) -> None:
        if self.state.round >= 1 and a != self.spec.null_action:
            self.eps_sum += logistic.bonus(self.state, a, x)
        logistic.update_design(self.state, a, x)

    def bound(self) -> float:
        s = self.state
        return logistic.bonus_sum_bound(self.spec.horizon, s.lam, s.delta,
                                        s.m, s.theta_bound, s.kappa)

    def report(self) -> dict:
        bound = self.bound()
        return {"twice_eps_sum": 2.0 * self.eps_sum, "bound": bound,
                "passed": 2.0 * self.eps_sum <= bound}


@dataclass
class RunResult:
    """One seeded run: the history plus per-round diagnostics."""

    seed: int
    history: History
    diagnostics: dict
    lock_round: int | None
    lp_fallbacks: int
    bonus_check: dict
    phase2_rounds: int
    expected_reward_phase2: float   # sum of r(a,x) P(a,x) over engaged rounds
    csv_text: str


@dataclass
class ExperimentResult:
    spec: ProblemSpec
    theta_star: np.ndarray
    policy_cfg: dict
    label: str
    runs: list

    @property
    def histories(self) -> list:
        return [r.history for r in self.runs]


def _run_single(spec: ProblemSpec, theta_star, policy_cfg: dict,
                seed: int) -> RunResult:
    if np.linalg.norm(theta_star) > spec.theta_bound + 1e-9:
        raise ValueError("hidden parameter lies outside the admissible ball")
    ctx_rng, conv_rng, pol_rng = make_rng_streams(seed)
    env = EnvState(true_theta=theta_star, rng_seed=seed)
    policy = make_policy(spec, policy_cfg)
    tracker = BonusSumTracker(spec, delta=policy_cfg.get("delta", 0.05))
    history = History(spec.d)
    diag = {"gamma": [], "theta_err": [], "max_eps": []}
    theta = np.asarray(theta_star, dtype=float)
    true_p = sigmoid(spec.transfer @ theta)
    phase2 = 0
    exp_reward = 0.0
    for _ in range(spec.horizon):
        x = sample_context(spec, ctx_rng)
        a = policy.act(x, pol_rng)
        tracker.update(a, x)
        outcome = play_round(env, spec, history, x, a, conv_rng)
        policy.record(outcome)
        diag["gamma"].append(policy.last_gamma)
        diag["max_eps"].append(policy.last_max_eps)
        if isinstance(policy, LogisticLpPolicy):
            diag["theta_err"].append(
                float(np.linalg.norm(policy.state.theta_hat - theta)))
        else:
            diag["theta_err"].append(None)
        if policy.phase2_engaged:
            phase2 += 1
            if a != spec.null_action:
                exp_reward += float(spec.reward[a, x] * true_p[a, x])
    return RunResult(
        seed=seed,
        history=history,
        diagnostics=diag,
        lock_round=policy.lock_round,
        lp_fallbacks=getattr(policy, "lp_fallbacks", 0),
        bonus_check=tracker.report(),
        phase2_rounds=phase2,
        expected_reward_phase2=exp_reward,
        csv_text=history_to_csv(history, diag),
    )


def _run_single_star(args):
    return _run_single(*args)


def run_experiment(spec: ProblemSpec, theta_star, policy_cfg: dict,
                   seeds, out_dir=None, label: str = "run",
                   workers: int = 1) -> ExperimentResult:
    """Run one policy configuration over several seeds.

    Each seed is independent and deterministic; a failing seed raises after
    the others complete, carrying the per-seed cause.  When ``out_dir`` is
    set, one CSV per run is written as ``<label>_seed<seed>.csv``.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("at least one seed is required")
    tasks = [(spec, theta_star, policy_cfg, s) for s in seeds]
    failures = []
    runs = []
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_single_star, task) for task in tasks]
            for task, fut in zip(tasks, futures):
                try:
                    runs.append(fut.result())
                except Exception as exc:   # noqa: BLE001 - isolate per seed
                    failures.append((task[3], exc))
    else:
        for task in tasks:
            try:
                runs.append(_run_single(*task))
            except Exception as exc:   # noqa: BLE001 - isolate per seed
                failures.append((task[3], exc))
    if failures:
        detail = "; ".join(f"seed {s}: {e!r}" for s, e in failures)
        raise RuntimeError(f"{len(failures)} seed(s) failed: {detail}")
    result = ExperimentResult(spec=spec, theta_star=np.asarray(theta_star),
                              policy_cfg=dict(policy_cfg), label=label,
                              runs=runs)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for run in runs:
            path = os.path.join(out_dir, f"{label}_seed{run.seed}.csv")
            with open(path, "w") as fh:
                fh.write(run.csv_text)
    return result


# -- metrics ------------------------------------------------------------------


@dataclass
class MetricsSummary:
    """Across-seed curves and final statistics for one configuration."""

    label: str
    horizon: int
    n_seeds: int
    opt_value: float
    budget: float
    curves: dict                    # metric -> {"mean": [...], "se": [...] | None}
    final_regret_mean: float
    final_regret_se: float | None
    final_regret_per_seed: list
    final_cost_per_seed: list       # one d-vector per seed
    lock_rounds: list
    bonus_checks: list

    def to_config(self) -> dict:
        return {
            "label": self.label,
            "horizon": self.horizon,
            "n_seeds": self.n_seeds,
            "opt_value": self.opt_value,
            "budget": self.budget,
            "final_regret_mean": self.final_regret_mean,
            "final_regret_se": self.final_regret_se,
            "final_regret_per_seed": self.final_regret_per_seed,
            "final_cost_per_seed": self.final_cost_per_seed,
            "lock_rounds": self.lock_rounds,
            "bonus_checks": self.bonus_checks,
        }


def _mean_se(matrix: np.ndarray):
    mean = matrix.mean(axis=0)
    if matrix.shape[0] < 2:
        return mean, None
    se = matrix.std(axis=0, ddof=1) / math.sqrt(matrix.shape[0])
    return mean, se


def aggregate(result: ExperimentResult) -> MetricsSummary:
    """Per-round means and standard errors across the seeds of one config.

    The benchmark value is computed once from the true instance; partial
    regret at round t is ``t * OPT / T - cum_reward_t`` and the cost-slack
    curves are ``cum_cost_i(t) - t * B / T``.
    """
    if not result.runs:
        raise ValueError("aggregate needs at least one run")
    spec = result.spec
    opt = compute_opt(spec, result.theta_star)
    T, d = spec.horizon, spec.d
    t_axis = np.arange(1, T + 1)

    reward_rows = []
    cost_rows = []
    for run in result.runs:
        rewards = np.array([rec.reward for rec in run.history.records])
        costs = np.array([rec.cost for rec in run.history.records])
        reward_rows.append(np.cumsum(rewards))
        cost_rows.append(np.cumsum(costs, axis=0))
    cum_reward = np.asarray(reward_rows)
    cum_cost = np.stack(cost_rows)

    curves = {}
    regret_curves = t_axis[None, :] * opt / T - cum_reward
    mean, se = _mean_se(regret_curves)
    curves["partial_regret"] = {"mean": mean, "se": se}
    for i in range(d):
        slack = cum_cost[:, :, i] - t_axis[None, :] * spec.budget / T
        mean, se = _mean_se(slack)
        curves[f"cost_slack_{i + 1}"] = {"mean": mean, "se": se}

    final = [regret(run.history, opt) for run in result.runs]
    final_arr = np.asarray(final)
    final_se = None if len(final) < 2 \
        else float(final_arr.std(ddof=1) / math.sqrt(len(final)))
    return MetricsSummary(
        label=result.label,
        horizon=T,
        n_seeds=len(result.runs),
        opt_value=opt,
        budget=spec.budget,
        curves=curves,
        final_regret_mean=float(final_arr.mean()),
        final_regret_se=final_se,
        final_regret_per_seed=[float(v) for v in final],
        final_cost_per_seed=[run.history.cumulative_cost.tolist()
                             for run in result.runs],
        lock_rounds=[run.lock_round for run in result.runs],
        bonus_checks=[run.bonus_check for run in result.runs],
    )


def emit_plot_data(summary: MetricsSummary, out_dir) -> dict:
    """Write the long-format curves CSV and the JSON summary for one config.

    Returns the paths written.  The CSV has columns ``t,metric,mean,se``
    (``se`` empty when absent); the JSON carries final regret, lock
    statistics, and the bonus-sum check results.
    """
    os.makedirs(out_dir, exist_ok=True)
    curves_path = os.path.join(out_dir, f"curves_{summary.label}.csv")
    with open(curves_path, "w") as fh:
        fh.write("t,metric,mean,se\n")
        for metric, data in summary.curves.items():
            mean = data["mean"]
            se = data["se"]
            for idx in range(len(mean)):
                se_txt = "" if se is None else repr(float(se[idx]))
                fh.write(f"{idx + 1},{metric},{float(mean[idx])!r},{se_txt}\n")
    summary_path = os.path.join(out_dir, f"summary_{summary.label}.json")
    with open(summary_path, "w") as fh:
        json.dump(summary.to_config(), fh, indent=2)
        fh.write("\n")
    return {"curves": curves_path, "summary": summary_path}


# -- the two-policy sweep ------------------------------------------------------


DEFAULT_ETA_GRID = (0.005, 0.01, 0.05, 0.1, 0.2)
DEFAULT_EXPLORE_SCALES = (0.025, 0.1, 0.3)


def audit_rows(label: str, result: ExperimentResult) -> list:
    """Per-run budget/bonus audit entries for one experiment."""
    B = result.spec.budget
    rows = []
    for run in result.runs:
        rows.append({
            "label": label,
            "seed": run.seed,
            "budget_ok": bool(np.all(run.history.cumulative_cost <= B)),
            "bonus_ok": bool(run.bonus_check["passed"]),
            "lock_round": run.lock_round,
        })
    return rows


def run_benchmark(inst: LoanInstance, *, seeds=range(10),
                  explore_scales=DEFAULT_EXPLORE_SCALES,
                  eta_grid=DEFAULT_ETA_GRID,
                  box_b_lambda: float = 0.0129,
                  box_d_lambda: float = 0.2452,
                  warm_start: int = 50,
                  out_dir=None, workers: int = 1) -> dict:
    """Sweep the conversion-model policy against the scalarized baseline.

    Both policies use the log bonus family over the swept exploration
    multipliers.  The baseline's trade-off weight is fed the instance-true
    ``OPT / B`` and its learning rate is picked in hindsight per sweep point
    (lowest mean final regret on the grid).
    """
    spec = inst.spec
    seeds = list(seeds)
    opt = compute_opt(spec, inst.theta_star)
    Z = opt / spec.budget
    report = {"opt": opt, "Z": Z, "configs": {}, "audits": []}

    for scale in explore_scales:
        label = f"box-b_C{scale:g}"
        cfg = {"policy": "box-b", "nu_mode": "empirical",
               "working_budget": "full", "lambda": box_b_lambda,
               "warm_start": warm_start, "explore_scale": scale,
               "bonus_form": "log", "kappa": 1.0}
        res = run_experiment(spec, inst.theta_star, cfg, seeds,
                             out_dir=out_dir, label=label, workers=workers)
        summary = aggregate(res)
        report["audits"] += audit_rows(label, res)
        if out_dir is not None:
            emit_plot_data(summary, out_dir)
        report["configs"][label] = summary

    for scale in explore_scales:
        best = None
        for eta in eta_grid:
            cfg = {"policy": "box-d", "Z": Z, "eta": eta,
                   "lambda": box_d_lambda, "warm_start": warm_start,
                   "explore_scale": scale, "bonus_form": "log",
                   "feature_table": inst.features_extended}
            label = f"box-d_C{scale:g}_eta{eta:g}"
            res = run_experiment(spec, inst.theta_star, cfg, seeds,
                                 label=label, workers=workers)
            summary = aggregate(res)
            report["audits"] += audit_rows(label, res)
            if best is None or summary.final_regret_mean < best[1].final_regret_mean:
                best = (eta, summary, res)
        eta, summary, res = best
        label = f"box-d_C{scale:g}"
        summary.label = label
        report["configs"][label] = summary
        report.setdefault("eta_picked", {})[label] = eta
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            for run in res.runs:
                path = os.path.join(out_dir, f"{label}_seed{run.seed}.csv")
                with open(path, "w") as fh:
                    fh.write(run.csv_text)
            emit_plot_data(summary, out_dir)
    return report
