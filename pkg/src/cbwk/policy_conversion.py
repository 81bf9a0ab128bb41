"""Adaptive policy for the conversion model: guard, estimate, optimize.

Each round runs up to three phases.  Phase 0 is an irreversible switch to
permanent no-op once any cumulative cost component exceeds budget - 1, which
makes the hard budget constraint unconditional.  Phase 1 refits the logistic
estimate and turns it into optimistic conversion probabilities.  Phase 2
solves the sampling program with those probabilities (against the true or
the empirical context distribution) and draws the action from the resulting
per-context distribution.
"""

from __future__ import annotations

import math

import numpy as np

from cbwk import logistic
from cbwk.core import History, ProblemSpec, RoundOutcome, sigmoid
from cbwk.errors import MissingDistribution, NumericalInstability
from cbwk.lp import build_lp, check_kkt, solve_lp

__all__ = [
    "conservative_budget_known",
    "conservative_budget_empirical",
    "LogisticLpPolicy",
    "regret",
]


def conservative_budget_known(B: float, T: int, d: int, delta: float) -> float:
    """Shrunken working budget when the context distribution is known.

    May be nonpositive for small B; callers treat that as the degenerate
    all-null regime.
    """
    return B - 2.0 - math.sqrt(2.0 * T * math.log(4.0 * d / delta))


def conservative_budget_empirical(B: float, T: int, d: int, delta: float,
                                  n_contexts: int) -> float:
    """Shrunken working budget when the context distribution is estimated.

    Adds a uniform-deviation allowance proportional to the number of
    contexts on top of the known-distribution shrinkage.
    """
    slack = 2.0 + math.sqrt(2.0 * T * math.log(4.0 * d / delta))
    if T > 0:
        slack += n_contexts * math.sqrt(
            2.0 * T * math.log(2.0 * T * n_contexts / delta))
    return B - slack


def regret(history: History, opt_value: float) -> float:
    """Static-benchmark value minus the realized cumulative reward."""
    return opt_value - history.cumulative_reward


def sample_from_pi(pi_column: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from one per-context action distribution."""
    cdf = np.cumsum(pi_column)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(pi_column) - 1))


class LogisticLpPolicy:
    """The conversion-model policy (config id ``box-b``).

    Parameters
    ----------
    spec : ProblemSpec
    nu_mode : "known" | "empirical"
        Whether Phase 2 uses the spec's context distribution or running
        empirical frequencies (updated with the current round's context
        before solving).
    working_budget : "theory" | "full" | float
        Budget handed to Phase 2: the conservative theoretical value, the
        full budget, or an explicit number.
    lam : "auto" | float
        Regularization; "auto" uses m * ln(1 + T/m).
    warm_start : int
        Rounds played uniformly over non-null actions before Phase 2
        engages (round 1 always plays an arbitrary non-null action).
    explore_scale : float
        Multiplier C on the exploration widths.
    bonus_form : "theory" | "log"
        Width family: the confidence-radius form, or C (1 + ln s) times the
        design norm.
    kappa : float or None
        Override for the inverse-slope constant (None computes it from the
        instance).
    oracle_theta : ndarray or None
        When set, skip fitting and predict with this parameter (diagnostic
        mode).
    lp_debug : bool
        Certify every solve with the KKT report at tol 1e-8; failures are
        counted in ``kkt_failures``.
    """

    policy_id = "box-b"

    def __init__(self, spec: ProblemSpec, *, nu_mode: str = "known",
                 working_budget="theory", delta: float = 0.05,
                 lam="auto", warm_start: int = 50, refit_every: int = 1,
                 explore_scale: float = 1.0, bonus_form: str = "theory",
                 kappa: float | None = None, oracle_theta=None,
                 lp_debug: bool = False):
        if nu_mode not in ("known", "empirical"):
            raise ValueError(f"unknown nu_mode {nu_mode!r}")
        if bonus_form not in ("theory", "log"):
            raise ValueError(f"unknown bonus_form {bonus_form!r}")
        if nu_mode == "known" and spec.context_weights is None:
            raise MissingDistribution("known-nu mode needs context_weights")
        self.spec = spec
        self.nu_mode = nu_mode
        self.delta = float(delta)
        if lam == "auto":
            lam = spec.m * math.log(1.0 + spec.horizon / spec.m)
        self.lam = float(lam)
        self.warm_start = int(warm_start)
        self.refit_every = max(1, int(refit_every))
        self.explore_scale = float(explore_scale)
        self.bonus_form = bonus_form
        self.oracle_theta = None if oracle_theta is None \
            else np.asarray(oracle_theta, dtype=float)

        self.state = logistic.LogisticState.create(
            spec, self.lam, self.delta, kappa=kappa)
        if self.oracle_theta is not None:
            self.state.theta_hat = self.oracle_theta.copy()
            self.state.theta_mle = self.oracle_theta.copy()

        if working_budget == "theory":
            if nu_mode == "known":
                wb = conservative_budget_known(
                    spec.budget, spec.horizon, spec.d, self.delta)
            else:
                wb = conservative_budget_empirical(
                    spec.budget, spec.horizon, spec.d, self.delta,
                    spec.n_contexts)
        elif working_budget == "full":
            wb = spec.budget
        else:
            wb = float(working_budget)
        self.working_budget = wb

        self.cum_cost = np.zeros(spec.d)
        self.locked = False
        self.lock_round: int | None = None
        self.nu_counts = np.zeros(spec.n_contexts)
        self.lp_fallbacks = 0
        self.lp_debug = bool(lp_debug)
        self.kkt_failures = 0
        self._last_refit_round = -1
        self._lp_cache_key = None
        self._lp_cache_pi = None
        # Per-act diagnostics, refreshed at the top of act().
        self.last_gamma: float | None = None
        self.last_max_eps: float | None = None
        self.phase2_engaged = False

    # -- per-round interface -------------------------------------------------

    def observe_context(self, x: int) -> None:
        self.nu_counts[x] += 1.0

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
            self.observe_context(x)

        if self.locked or np.any(self.cum_cost > spec.budget - 1.0):
            if not self.locked:
                self.locked = True
                self.lock_round = self.state.round + 1
            return spec.null_action
        if self.working_budget <= 0.0:
            return spec.null_action

        t = self.state.round + 1
        nonnull = spec.nonnull_actions()
        if t == 1:
            return nonnull[0]
        if t <= self.warm_start:
            return int(nonnull[rng.integers(len(nonnull))])

        p_hat, eps = self._phase1(t)
        upper = np.minimum(p_hat + eps, 1.0)
        self.last_max_eps = float(eps.max())

        nu_vec = spec.context_weights if self.nu_mode == "known" else self.nu_hat
        pi = self._phase2(nu_vec, upper)
        if pi is None:
            return spec.null_action
        self.phase2_engaged = True
        return sample_from_pi(pi[:, x], rng)

    def record(self, outcome: RoundOutcome) -> None:
        self.cum_cost += outcome.cost
        self.state.add_observation(outcome.action_id, outcome.context_id,
                                   outcome.y)

    # -- phases --------------------------------------------------------------

    def _phase1(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        state = self.state
        if self.oracle_theta is None:
            if self._last_refit_round < 0 \
                    or t - self._last_refit_round >= self.refit_every:
                logistic.refit(state)
                self._last_refit_round = t
        z = state.transfer @ state.theta_hat
        p_hat = sigmoid(z)
        p_hat[state.null_action] = 0.0
        if self.bonus_form == "theory":
            _, eps = logistic.grid_estimates(state)
            self.last_gamma = logistic.confidence_radius(
                state.round, self.lam, self.delta, state.m, state.theta_bound)
        else:
            s = max(state.round, 1)
            scale = 1.0 + math.log(s)
            eps = scale * logistic.design_norms(state)
            self.last_gamma = scale
        return p_hat, self.explore_scale * eps

    def _phase2(self, nu_vec: np.ndarray, upper: np.ndarray):
        spec = self.spec
        gains = spec.reward * upper
        rates = spec.cost * upper[:, :, None]
        key = (nu_vec.tobytes(), upper.tobytes(), self.working_budget)
        if key == self._lp_cache_key:
            return self._lp_cache_pi
        lp = build_lp(nu_vec, gains, rates, self.working_budget,
                      spec.horizon, null_action=spec.null_action)
        try:
            sol = solve_lp(lp)
        except NumericalInstability:
            self.lp_fallbacks += 1
            return None
        if self.lp_debug and sol.status == "optimal" \
                and not check_kkt(lp, sol, tol=1e-8).passed:
            self.kkt_failures += 1
        self._lp_cache_key = key
        self._lp_cache_pi = sol.pi
        return sol.pi
