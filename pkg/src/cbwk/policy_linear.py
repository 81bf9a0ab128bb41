"""Policies for linearly structured rewards and costs.

Two baselines share the ridge estimation machinery.  The first (config id
``box-c``) mirrors the conversion-model policy: upper-confidence rewards and
lower-confidence costs feed the same per-round sampling program.  The second
(config id ``box-d``) trades rewards against costs through a scalarization
weight updated by projected gradient ascent on the unit l1 ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cbwk.core import History, ProblemSpec, RoundOutcome
from cbwk.errors import MissingDistribution, NumericalInstability
from cbwk.lp import build_lp, check_kkt, solve_lp
from cbwk.policy_conversion import sample_from_pi

__all__ = [
    "LinEstimator",
    "lin_fit",
    "lin_confidence_radius",
    "conf_bounds_lin",
    "lin_conservative_budget",
    "project_l1",
    "pgd_update",
    "LinearLpPolicy",
    "DualGradientPolicy",
]


@dataclass
class LinEstimator:
    """Ridge estimates of the reward parameter and each cost parameter.

    ``X`` is the regularized design matrix over non-null plays; ``mu_hat``
    and ``theta_hats`` solve the normal equations for the stored sums;
    ``gamma_lin`` holds the confidence radius currently in force.
    """

    m: int
    d: int
    lam: float
    X: np.ndarray = None
    X_inv: np.ndarray = None
    b_reward: np.ndarray = None
    b_cost: np.ndarray = None
    mu_hat: np.ndarray = None
    theta_hats: np.ndarray = None
    gamma_lin: float = 0.0
    obs_count: int = 0
    round: int = 0

    @classmethod
    def create(cls, m: int, d: int, lam: float) -> "LinEstimator":
        est = cls(m=m, d=d, lam=float(lam))
        est.X = lam * np.eye(m)
        est.X_inv = np.eye(m) / lam
        est.b_reward = np.zeros(m)
        est.b_cost = np.zeros((d, m))
        est.mu_hat = np.zeros(m)
        est.theta_hats = np.zeros((d, m))
        return est

    def add_observation(self, phi: np.ndarray | None, reward: float,
                        cost: np.ndarray) -> None:
        """Fold one round in; ``phi=None`` marks a no-op round (no data)."""
        self.round += 1
        if phi is None:
            return
        self.X += np.outer(phi, phi)
        u = self.X_inv @ phi
        self.X_inv -= np.outer(u, u) / (1.0 + phi @ u)
        self.b_reward += phi * reward
        self.b_cost += np.outer(cost, phi)
        self.obs_count += 1

    def fit(self) -> None:
        self.mu_hat = self.X_inv @ self.b_reward
        self.theta_hats = self.b_cost @ self.X_inv.T


def lin_fit(history: History, spec: ProblemSpec, lam: float) -> LinEstimator:
    """Ridge estimates from a history's non-null rounds.

    An empty history gives zero estimates (pure regularization).
    """
    est = LinEstimator.create(spec.m, spec.d, lam)
    for rec in history.records:
        if rec.action_id == spec.null_action:
            est.add_observation(None, 0.0, np.zeros(spec.d))
        else:
            est.add_observation(spec.transfer[rec.action_id, rec.context_id],
                                rec.reward, rec.cost)
    est.fit()
    return est


def lin_confidence_radius(t: int, lam: float, delta: float, m: int, d: int,
                          theta_bound: float) -> float:
    """Ellipsoid radius shared by the reward and the d cost estimates."""
    return 0.25 * math.sqrt(
        m * math.log((1.0 + t / (lam * m)) / (delta / (d + 1.0)))
    ) + math.sqrt(lam) * theta_bound


def conf_bounds_lin(est: LinEstimator, phi: np.ndarray) -> tuple[float, np.ndarray]:
    """Clipped optimistic reward and pessimistic costs at one feature vector.

    Uses ``est.gamma_lin`` as the radius; both outputs are clamped to [0, 1].
    """
    eps = est.gamma_lin * math.sqrt(max(float(phi @ est.X_inv @ phi), 0.0))
    upper = min(max(float(phi @ est.mu_hat) + eps, 0.0), 1.0)
    lower = np.clip(est.theta_hats @ phi - eps, 0.0, 1.0)
    return upper, lower


def lin_conservative_budget(B: float, T: int, d: int, delta: float, m: int,
                            theta_bound: float, n_contexts: int) -> float:
    """Working budget for the linear policy: B minus its deviation allowance."""
    slack = 2.0 + m * (2.0 * math.sqrt(2.0) * theta_bound + 1.0) \
        * math.sqrt(T) * math.log((1.0 + T / m) / (delta / (d + 1.0))) \
        + math.sqrt(2.0 * T * math.log(4.0 * d / delta))
    if T > 0:
        slack += n_contexts * math.sqrt(
            2.0 * T * math.log(2.0 * T * n_contexts / delta))
    return B - slack


def project_l1(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {z >= 0, sum(z) <= 1}.

    Clamping negatives suffices when the clamped mass fits; otherwise the
    point lands on the simplex face, found by the sort-and-threshold rule.
    """
    v = np.asarray(v, dtype=float)
    w = np.maximum(v, 0.0)
    total = float(w.sum())
    if total <= 1.0:
        return w
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    rho = int(np.max(np.where(u - css / idx > 0)[0])) + 1
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def pgd_update(zeta: np.ndarray, cost: np.ndarray, B: float, T: int,
               eta: float) -> np.ndarray:
    """One projected gradient-ascent step on the scalarization weight."""
    return project_l1(zeta + eta * (np.asarray(cost, dtype=float) - B / T))


class _RidgePolicyBase:
    """Shared guard/warm-start/estimation plumbing for the two policies."""

    def __init__(self, spec: ProblemSpec, *, delta: float, lam,
                 warm_start: int, explore_scale: float, bonus_form: str,
                 feature_table: np.ndarray | None, theta_bound: float | None):
        if bonus_form not in ("theory", "log"):
            raise ValueError(f"unknown bonus_form {bonus_form!r}")
        self.spec = spec
        self.delta = float(delta)
        if lam == "auto":
            lam = spec.m * math.log(1.0 + spec.horizon / spec.m)
        self.lam = float(lam)
        self.warm_start = int(warm_start)
        self.explore_scale = float(explore_scale)
        self.bonus_form = bonus_form
        self.features = spec.transfer if feature_table is None \
            else np.asarray(feature_table, dtype=float)
        self.theta_bound = spec.theta_bound if theta_bound is None \
            else float(theta_bound)
        self.est = LinEstimator.create(self.features.shape[2], spec.d, self.lam)
        self.cum_cost = np.zeros(spec.d)
        self.locked = False
        self.lock_round: int | None = None
        self.last_gamma: float | None = None
        self.last_max_eps: float | None = None
        self.phase2_engaged = False

    def _guard(self) -> bool:
        """Phase 0: returns True when the policy must play the no-op forever."""
        if self.locked or np.any(self.cum_cost > self.spec.budget - 1.0):
            if not self.locked:
                self.locked = True
                self.lock_round = self.est.round + 1
            return True
        return False

    def _widths(self) -> np.ndarray:
        quad = np.einsum("axm,mk,axk->ax", self.features, self.est.X_inv,
                         self.features)
        norms = np.sqrt(np.maximum(quad, 0.0))
        norms[self.spec.null_action] = 0.0
        if self.bonus_form == "theory":
            radius = lin_confidence_radius(
                self.est.round, self.lam, self.delta, self.est.m,
                self.spec.d, self.theta_bound)
        else:
            radius = 1.0 + math.log(max(self.est.round, 1))
        self.last_gamma = radius
        self.est.gamma_lin = radius * self.explore_scale
        return self.explore_scale * radius * norms

    def _estimate_tables(self) -> tuple[np.ndarray, np.ndarray]:
        self.est.fit()
        r_hat = self.features @ self.est.mu_hat
        c_hat = np.einsum("axm,dm->axd", self.features, self.est.theta_hats)
        r_hat[self.spec.null_action] = 0.0
        c_hat[self.spec.null_action] = 0.0
        return r_hat, c_hat

    def record(self, outcome: RoundOutcome) -> None:
        self.cum_cost += outcome.cost
        if outcome.action_id == self.spec.null_action:
            self.est.add_observation(None, 0.0, np.zeros(self.spec.d))
        else:
            phi = self.features[outcome.action_id, outcome.context_id]
            self.est.add_observation(phi, outcome.reward, outcome.cost)


class LinearLpPolicy(_RidgePolicyBase):
    """Ridge-estimation policy solving the sampling program (id ``box-c``).

    Phase 2 maximizes optimistic expected rewards under pessimistic expected
    costs; gains and cost rates enter the program directly rather than
    multiplying a conversion probability.
    """

    policy_id = "box-c"

    def __init__(self, spec: ProblemSpec, *, nu_mode: str = "empirical",
                 working_budget="full", delta: float = 0.05, lam="auto",
                 warm_start: int = 50, explore_scale: float = 1.0,
                 bonus_form: str = "theory",
                 feature_table: np.ndarray | None = None,
                 theta_bound: float | None = None,
                 oracle_params=None, lp_debug: bool = False):
        super().__init__(spec, delta=delta, lam=lam, warm_start=warm_start,
                         explore_scale=explore_scale, bonus_form=bonus_form,
                         feature_table=feature_table, theta_bound=theta_bound)
        if nu_mode not in ("known", "empirical"):
            raise ValueError(f"unknown nu_mode {nu_mode!r}")
        if nu_mode == "known" and spec.context_weights is None:
            raise MissingDistribution("known-nu mode needs context_weights")
        self.nu_mode = nu_mode
        if working_budget == "theory":
            wb = lin_conservative_budget(
                spec.budget, spec.horizon, spec.d, self.delta,
                self.est.m, self.theta_bound, spec.n_contexts)
        elif working_budget == "full":
            wb = spec.budget
        else:
            wb = float(working_budget)
        self.working_budget = wb
        self.oracle_params = oracle_params
        self.nu_counts = np.zeros(spec.n_contexts)
        self.lp_fallbacks = 0
        self.lp_debug = bool(lp_debug)
        self.kkt_failures = 0
        self._lp_cache_key = None
        self._lp_cache_pi = None

    @property
    def nu_hat(self) -> np.ndarray:
        total = self.nu_counts.sum()
        if total <= 0:
            raise MissingDistribution("no contexts observed yet")
        return self.nu_counts / total

    def act(self, x: int, rng: np.random.Generator) -> int:
        spec = self.spec
        self.last_gamma = None
        self.last_max_eps = None
        self.phase2_engaged = False
        if self.nu_mode == "empirical":
            self.nu_counts[x] += 1.0
        if self._guard():
            return spec.null_action
        if self.working_budget <= 0.0:
            return spec.null_action

        t = self.est.round + 1
        nonnull = spec.nonnull_actions()
        if t == 1:
            return nonnull[0]
        if t <= self.warm_start:
            return int(nonnull[rng.integers(len(nonnull))])

        if self.oracle_params is not None:
            mu, thetas = self.oracle_params
            r_hat = self.features @ np.asarray(mu, dtype=float)
            c_hat = np.einsum("axm,dm->axd", self.features,
                              np.asarray(thetas, dtype=float))
            r_hat[spec.null_action] = 0.0
            c_hat[spec.null_action] = 0.0
            eps = np.zeros_like(r_hat)
        else:
            r_hat, c_hat = self._estimate_tables()
            eps = self._widths()
        self.last_max_eps = float(eps.max())
        upper = np.clip(r_hat + eps, 0.0, 1.0)
        lower = np.clip(c_hat - eps[:, :, None], 0.0, 1.0)
        upper[spec.null_action] = 0.0
        lower[spec.null_action] = 0.0

        nu_vec = spec.context_weights if self.nu_mode == "known" else self.nu_hat
        key = (nu_vec.tobytes(), upper.tobytes(), lower.tobytes())
        if key == self._lp_cache_key:
            pi = self._lp_cache_pi
        else:
            lp = build_lp(nu_vec, upper, lower, self.working_budget,
                          spec.horizon, null_action=spec.null_action)
            try:
                sol = solve_lp(lp)
            except NumericalInstability:
                self.lp_fallbacks += 1
                return spec.null_action
            if self.lp_debug and sol.status == "optimal" \
                    and not check_kkt(lp, sol, tol=1e-8).passed:
                self.kkt_failures += 1
            self._lp_cache_key = key
            self._lp_cache_pi = sol.pi
            pi = sol.pi
        self.phase2_engaged = True
        return sample_from_pi(pi[:, x], rng)


class DualGradientPolicy(_RidgePolicyBase):
    """Scalarized baseline with a gradient-updated trade-off weight (``box-d``).

    Phase 2 greedily plays the non-null action maximizing the optimistic
    reward minus ``Z`` times the current weight's pessimistic cost, then the
    weight takes one projected step toward the cost overshoot direction.
    Confidence bounds here are used unclamped, matching the scheme this
    baseline adapts.
    """

    policy_id = "box-d"

    def __init__(self, spec: ProblemSpec, *, Z: float, eta: float = 0.05,
                 delta: float = 0.05, lam="auto", warm_start: int = 50,
                 explore_scale: float = 1.0, bonus_form: str = "theory",
                 feature_table: np.ndarray | None = None,
                 theta_bound: float | None = None):
        super().__init__(spec, delta=delta, lam=lam, warm_start=warm_start,
                         explore_scale=explore_scale, bonus_form=bonus_form,
                         feature_table=feature_table, theta_bound=theta_bound)
        self.Z = float(Z)
        self.eta = float(eta)
        self.zeta = np.zeros(spec.d)

    def act(self, x: int, rng: np.random.Generator) -> int:
        spec = self.spec
        self.last_gamma = None
        self.last_max_eps = None
        self.phase2_engaged = False
        if self._guard():
            return spec.null_action

        t = self.est.round + 1
        nonnull = spec.nonnull_actions()
        if t == 1:
            return nonnull[0]
        if t <= self.warm_start:
            return int(nonnull[rng.integers(len(nonnull))])

        r_hat, c_hat = self._estimate_tables()
        eps = self._widths()
        self.last_max_eps = float(eps.max())
        upper = r_hat + eps
        lower = c_hat - eps[:, :, None]
        scores = upper[:, x] - self.Z * (lower[:, x] @ self.zeta)
        scores[spec.null_action] = -np.inf
        self.phase2_engaged = True
        return int(np.argmax(scores))

    def record(self, outcome: RoundOutcome) -> None:
        super().record(outcome)
        self.zeta = pgd_update(self.zeta, outcome.cost, self.spec.budget,
                               self.spec.horizon, self.eta)
