"""Domain types, the simulated environment, and the round-by-round protocol.

An instance is a finite action set with a designated no-op, a finite set of
context vectors, feature/reward/cost tables over (action, context) pairs, a
horizon and a budget.  The environment draws a context each round, the learner
picks an action, and a Bernoulli conversion decides whether the tabled reward
and costs are realized.  The no-op action never converts and never pays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from cbwk.errors import (
    HorizonExceeded,
    MissingDistribution,
    MissingField,
    NormViolation,
    NullActionConversion,
    NullActionNonzero,
    RangeViolation,
)

__all__ = [
    "ProblemSpec",
    "EnvState",
    "RoundOutcome",
    "History",
    "validate_spec",
    "sigmoid",
    "sample_context",
    "draw_conversion",
    "play_round",
    "make_rng_streams",
    "history_to_csv",
]

_PROB_TOL = 1e-12


def sigmoid(z):
    """Logistic link 1 / (1 + exp(-z)), stable for any finite argument.

    Both exponentials below receive non-positive arguments, so the value
    saturates to 0 or 1 instead of overflowing.  Accepts scalars or arrays.
    """
    z = np.asarray(z, dtype=float)
    lo = np.minimum(z, 0.0)
    out = np.exp(lo) / (np.exp(lo) + np.exp(lo - z))
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_slope(z):
    """Derivative of the logistic link, as sigmoid(z) * sigmoid(-z).

    The product form keeps full precision in the tails, where 1 - sigmoid(z)
    would cancel to zero.
    """
    z = np.asarray(z, dtype=float)
    return sigmoid(z) * sigmoid(-z)


@dataclass
class ProblemSpec:
    """A fully specified instance of the budgeted conversion problem.

    Attributes
    ----------
    actions : list[str]
        Ordered action names; ``null_action`` indexes the no-op.
    contexts : ndarray, shape (|X|, n)
        One row per context.
    transfer : ndarray, shape (|A|, |X|, m)
        Feature vectors phi(a, x); the no-op row is kept all-zero and is
        never read.  Euclidean norms are at most 1.
    reward : ndarray, shape (|A|, |X|)
        Reward table in [0, 1]; zero at the no-op.
    cost : ndarray, shape (|A|, |X|, d)
        Cost table in [0, 1]^d; zero at the no-op.
    horizon, budget : int, float
        Number of rounds and total budget (shared by all cost components).
    theta_bound : float
        Radius of the admissible ball for the conversion parameter.
    context_weights : ndarray or None
        True context distribution, when the environment role is played.
    """

    actions: list[str]
    null_action: int
    contexts: np.ndarray
    transfer: np.ndarray
    reward: np.ndarray
    cost: np.ndarray
    horizon: int
    budget: float
    theta_bound: float
    context_weights: np.ndarray | None = None

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_contexts(self) -> int:
        return self.contexts.shape[0]

    @property
    def m(self) -> int:
        return self.transfer.shape[2]

    @property
    def d(self) -> int:
        return self.cost.shape[2]

    def nonnull_actions(self) -> list[int]:
        return [a for a in range(self.n_actions) if a != self.null_action]

    def to_config(self) -> dict:
        """Serialize to the JSON document accepted by :func:`validate_spec`."""
        transfer = {
            self.actions[a]: self.transfer[a].tolist()
            for a in self.nonnull_actions()
        }
        doc = {
            "actions": list(self.actions),
            "null_action": self.null_action,
            "contexts": self.contexts.tolist(),
            "transfer": transfer,
            "reward": self.reward.tolist(),
            "cost": self.cost.tolist(),
            "horizon": self.horizon,
            "budget": self.budget,
            "theta_bound": self.theta_bound,
        }
        if self.context_weights is not None:
            doc["context_weights"] = self.context_weights.tolist()
        return doc


def validate_spec(raw_config: dict) -> ProblemSpec:
    """Build a :class:`ProblemSpec` from a parsed config document.

    Every type invariant is enforced here rather than trusted: the no-op row
    of the reward and cost tables must be zero, feature norms must not exceed
    1, rewards and costs must lie in [0, 1], and the context distribution,
    when present, must sum to 1.
    """
    required = ["actions", "null_action", "contexts", "transfer", "reward",
                "cost", "horizon", "budget", "theta_bound"]
    for key in required:
        if key not in raw_config:
            raise MissingField(f"missing required field {key!r}")

    actions = list(raw_config["actions"])
    null_action = int(raw_config["null_action"])
    if not 0 <= null_action < len(actions):
        raise MissingField("null_action out of range")
    contexts = np.atleast_2d(np.asarray(raw_config["contexts"], dtype=float))
    n_actions, n_contexts = len(actions), contexts.shape[0]

    reward = np.asarray(raw_config["reward"], dtype=float)
    cost = np.asarray(raw_config["cost"], dtype=float)
    if cost.ndim == 2:
        cost = cost[:, :, None]
    if reward.shape != (n_actions, n_contexts):
        raise MissingField(f"reward table must have shape ({n_actions}, {n_contexts})")
    if cost.shape[:2] != (n_actions, n_contexts):
        raise MissingField(f"cost table must have shape ({n_actions}, {n_contexts}, d)")

    raw_transfer = raw_config["transfer"]
    if isinstance(raw_transfer, dict):
        sample = next(iter(raw_transfer.values()))
        m = np.asarray(sample, dtype=float).shape[-1]
        transfer = np.zeros((n_actions, n_contexts, m))
        for a, name in enumerate(actions):
            if a == null_action:
                continue
            if name not in raw_transfer:
                raise MissingField(f"transfer missing action {name!r}")
            transfer[a] = np.asarray(raw_transfer[name], dtype=float)
    else:
        transfer = np.asarray(raw_transfer, dtype=float)
        if transfer.shape[:2] != (n_actions, n_contexts):
            raise MissingField("transfer table shape mismatch")
        transfer = transfer.copy()
        transfer[null_action] = 0.0

    norms = np.linalg.norm(transfer, axis=2)
    worst = float(norms.max(initial=0.0))
    if worst > 1.0 + 1e-12:
        raise NormViolation(f"feature norm {worst:.6g} exceeds 1")

    if np.any(reward < -_PROB_TOL) or np.any(reward > 1.0 + _PROB_TOL):
        raise RangeViolation("reward entries must lie in [0, 1]")
    if np.any(cost < -_PROB_TOL) or np.any(cost > 1.0 + _PROB_TOL):
        raise RangeViolation("cost entries must lie in [0, 1]")

    if np.any(reward[null_action] != 0.0) or np.any(cost[null_action] != 0.0):
        raise NullActionNonzero("no-op action must have zero reward and cost")

    horizon = int(raw_config["horizon"])
    budget = float(raw_config["budget"])
    theta_bound = float(raw_config["theta_bound"])
    if horizon <= 0:
        raise RangeViolation("horizon must be a positive integer")
    if budget <= 0:
        raise RangeViolation("budget must be positive")
    if theta_bound < 0:
        raise RangeViolation("theta_bound must be nonnegative")

    weights = None
    if raw_config.get("context_weights") is not None:
        weights = np.asarray(raw_config["context_weights"], dtype=float)
        if weights.shape != (n_contexts,):
            raise MissingField("context_weights length mismatch")
        if np.any(weights < 0) or abs(float(weights.sum()) - 1.0) > _PROB_TOL:
            raise RangeViolation("context_weights must be a probability vector")

    return ProblemSpec(
        actions=actions,
        null_action=null_action,
        contexts=contexts,
        transfer=transfer,
        reward=reward,
        cost=cost,
        horizon=horizon,
        budget=budget,
        theta_bound=theta_bound,
        context_weights=weights,
    )


def load_spec(path) -> ProblemSpec:
    """Read and validate a spec document from a JSON file."""
    with open(path) as fh:
        return validate_spec(json.load(fh))


@dataclass
class EnvState:
    """Environment-side state: the hidden parameter and the round counter."""

    true_theta: np.ndarray
    rng_seed: int
    round: int = 0

    def __post_init__(self):
        self.true_theta = np.asarray(self.true_theta, dtype=float)


@dataclass
class RoundOutcome:
    """What one round produced: conversion flag plus realized reward/costs."""

    t: int
    context_id: int
    action_id: int
    y: int
    reward: float
    cost: np.ndarray


@dataclass
class History:
    """Ordered round outcomes with running cumulative reward and costs."""

    d: int
    records: list[RoundOutcome] = field(default_factory=list)
    cumulative_reward: float = 0.0
    cumulative_cost: np.ndarray = None

    def __post_init__(self):
        if self.cumulative_cost is None:
            self.cumulative_cost = np.zeros(self.d)

    def append(self, outcome: RoundOutcome) -> None:
        self.records.append(outcome)
        self.cumulative_reward += outcome.reward
        self.cumulative_cost = self.cumulative_cost + outcome.cost

    def __len__(self) -> int:
        return len(self.records)

    def recompute_cumulatives(self) -> tuple[float, np.ndarray]:
        """Re-sum rewards and costs with compensated addition (for checks)."""
        reward = math.fsum(r.reward for r in self.records)
        cost = np.array(
            [math.fsum(r.cost[i] for r in self.records) for i in range(self.d)]
        )
        return reward, cost


def make_rng_streams(seed: int) -> tuple[np.random.Generator, ...]:
    """Three independent counter-based generators for one run.

    Sub-streams (context draws, conversion draws, policy randomization) are
    spawned deterministically from the 64-bit seed, so a run is reproducible
    from the seed alone.
    """
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.Generator(np.random.Philox(c)) for c in children)


def sample_context(spec: ProblemSpec, rng: np.random.Generator) -> int:
    """Draw one context id i.i.d. from the spec's context distribution."""
    if spec.context_weights is None:
        raise MissingDistribution("spec has no context distribution to sample")
    return int(rng.choice(spec.n_contexts, p=spec.context_weights))


def conversion_probability(env: EnvState, spec: ProblemSpec, a: int, x: int) -> float:
    """True conversion probability for a non-null action under the hidden parameter."""
    if a == spec.null_action:
        raise NullActionConversion("conversion probability is undefined for the no-op")
    return float(sigmoid(spec.transfer[a, x] @ env.true_theta))


def draw_conversion(env: EnvState, spec: ProblemSpec, a: int, x: int,
                    rng: np.random.Generator) -> int:
    """Draw the Bernoulli conversion for a non-null action in context x."""
    p = conversion_probability(env, spec, a, x)
    return int(rng.random() < p)


def play_round(env: EnvState, spec: ProblemSpec, history: History, x: int, a: int,
               rng: np.random.Generator) -> RoundOutcome:
    """Resolve one round: conversion draw, realized reward/costs, bookkeeping.

    The no-op action yields the all-zero outcome with y recorded as 0.
    Raises :class:`HorizonExceeded` after ``spec.horizon`` rounds.
    """
    if env.round >= spec.horizon:
        raise HorizonExceeded(f"horizon {spec.horizon} already reached")
    env.round += 1
    if a == spec.null_action:
        outcome = RoundOutcome(env.round, x, a, 0, 0.0, np.zeros(spec.d))
    else:
        y = draw_conversion(env, spec, a, x, rng)
        outcome = RoundOutcome(
            env.round, x, a, y,
            float(spec.reward[a, x] * y),
            spec.cost[a, x] * y,
        )
    history.append(outcome)
    return outcome


_CSV_NA = ""


def _fmt(value) -> str:
    if value is None:
        return _CSV_NA
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def history_to_csv(history: History, diagnostics: dict | None = None) -> str:
    """Render a run as CSV text.

    Columns: ``t,context_id,action_id,y,reward,cost_1..cost_d,cum_reward,
    cum_cost_1..cum_cost_d`` followed by the per-round diagnostic columns
    ``gamma,theta_err,max_eps`` when diagnostics are supplied.  Floats use
    shortest round-trip formatting so identical runs give identical bytes.
    """
    d = history.d
    header = ["t", "context_id", "action_id", "y", "reward"]
    header += [f"cost_{i + 1}" for i in range(d)]
    header += ["cum_reward"] + [f"cum_cost_{i + 1}" for i in range(d)]
    diag_cols = []
    if diagnostics is not None:
        diag_cols = ["gamma", "theta_err", "max_eps"]
        header += diag_cols
    lines = [",".join(header)]
    cum_r = 0.0
    cum_c = np.zeros(d)
    for idx, rec in enumerate(history.records):
        cum_r += rec.reward
        cum_c = cum_c + rec.cost
        row = [str(rec.t), str(rec.context_id), str(rec.action_id), str(rec.y),
               _fmt(rec.reward)]
        row += [_fmt(c) for c in rec.cost]
        row += [_fmt(cum_r)] + [_fmt(c) for c in cum_c]
        for col in diag_cols:
            series = diagnostics.get(col)
            row.append(_fmt(series[idx]) if series is not None else _CSV_NA)
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
