"""Optimistic logistic estimation of conversion probabilities.

One regularized logistic fit per round, an optional projection back onto the
admissible parameter ball, and upper confidence bounds whose widths shrink
with the design matrix accumulated over non-null plays.  The fit operates on
per-(action, context) sufficient statistics, so refitting stays cheap even
for long histories over a finite grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cbwk.core import History, ProblemSpec, sigmoid, sigmoid_slope
from cbwk.errors import NoConvergence

__all__ = [
    "LogisticState",
    "ConfidenceBound",
    "compute_kappa",
    "fit_mle",
    "project_theta",
    "confidence_radius",
    "bonus",
    "upper_bound",
    "update_design",
    "bonus_sum_bound",
    "refit",
]

GRAD_TOL = 1e-10
NEWTON_CAP = 200
ARMIJO_C = 1e-4
PGD_STEPS = 100
_REINVERT_EVERY = 512


def compute_kappa(spec: ProblemSpec, theta_bound: float) -> float:
    """Worst-case inverse slope of the logistic link over the instance.

    The slope decreases with |z| and |phi' theta| <= ||phi|| * theta_bound on
    the admissible ball, so the supremum is attained at ||phi|| * theta_bound
    for each pair.  Always at least 4, the inverse slope at 0.
    """
    kappa = 4.0
    for a in spec.nonnull_actions():
        norms = np.linalg.norm(spec.transfer[a], axis=1)
        z = norms * theta_bound
        kappa = max(kappa, float(np.max(1.0 / sigmoid_slope(z))))
    return kappa


@dataclass
class ConfidenceBound:
    """Point estimate, exploration width, and clipped upper bound."""

    p_hat: float
    epsilon: float
    upper: float


@dataclass
class LogisticState:
    """Evolving knowledge of the conversion parameter.

    Holds the regularized fit ``theta_mle``, its ball projection
    ``theta_hat``, the design matrix ``V`` (with its maintained inverse), and
    sufficient statistics of the non-null observations aggregated per unique
    (action, context) pair.
    """

    lam: float
    m: int
    kappa: float
    theta_bound: float
    delta: float
    transfer: np.ndarray
    null_action: int
    theta_mle: np.ndarray = None
    theta_hat: np.ndarray = None
    V: np.ndarray = None
    V_inv: np.ndarray = None
    obs_count: int = 0
    round: int = 0
    last_projection_objective: float | None = None
    _pair_index: dict = field(default_factory=dict)
    _phi: np.ndarray = None
    _counts: np.ndarray = None
    _successes: np.ndarray = None
    _updates_since_invert: int = 0

    @classmethod
    def create(cls, spec: ProblemSpec, lam: float, delta: float,
               theta_bound: float | None = None,
               kappa: float | None = None) -> "LogisticState":
        if theta_bound is None:
            theta_bound = spec.theta_bound
        if kappa is None:
            kappa = compute_kappa(spec, theta_bound)
        m = spec.m
        state = cls(
            lam=float(lam), m=m, kappa=float(kappa),
            theta_bound=float(theta_bound), delta=float(delta),
            transfer=spec.transfer, null_action=spec.null_action,
        )
        state.theta_mle = np.zeros(m)
        state.theta_hat = np.zeros(m)
        state.V = kappa * lam * np.eye(m)
        state.V_inv = np.eye(m) / (kappa * lam)
        state._phi = np.zeros((0, m))
        state._counts = np.zeros(0)
        state._successes = np.zeros(0)
        return state

    def add_observation(self, a: int, x: int, y: int) -> None:
        """Fold one played round into the design matrix and the fit data."""
        update_design(self, a, x)
        if a == self.null_action:
            return
        key = (a, x)
        j = self._pair_index.get(key)
        if j is None:
            j = len(self._pair_index)
            self._pair_index[key] = j
            self._phi = np.vstack([self._phi, self.transfer[a, x][None, :]])
            self._counts = np.append(self._counts, 0.0)
            self._successes = np.append(self._successes, 0.0)
        self._counts[j] += 1.0
        self._successes[j] += float(y)


def update_design(state: LogisticState, a: int, x: int) -> LogisticState:
    """Advance one round; non-null actions add phi phi' to the design matrix."""
    state.round += 1
    if a == state.null_action:
        return state
    phi = state.transfer[a, x]
    state.V += np.outer(phi, phi)
    state.obs_count += 1
    # Sherman-Morrison rank-one update, with periodic exact re-inversion.
    u = state.V_inv @ phi
    state.V_inv -= np.outer(u, u) / (1.0 + phi @ u)
    state._updates_since_invert += 1
    if state._updates_since_invert >= _REINVERT_EVERY:
        state.V_inv = np.linalg.inv(state.V)
        state._updates_since_invert = 0
    return state


def _log_likelihood(theta, phi, counts, successes, lam):
    z = phi @ theta
    # log sigmoid(z) = -log(1 + exp(-z)), stable on both tails
    log_p = -np.logaddexp(0.0, -z)
    log_q = -np.logaddexp(0.0, z)
    ll = float(successes @ log_p + (counts - successes) @ log_q)
    return ll - 0.5 * lam * float(theta @ theta)


def _fit_aggregated(phi, counts, successes, lam, m, theta0=None):
    """Damped Newton on the regularized log-likelihood over unique rows."""
    theta = np.zeros(m) if theta0 is None else theta0.copy()
    if phi.shape[0] == 0:
        return np.zeros(m)
    for _ in range(NEWTON_CAP):
        z = phi @ theta
        p = sigmoid(z)
        grad = phi.T @ (successes - counts * p) - lam * theta
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= GRAD_TOL:
            return theta
        w = counts * p * (1.0 - p)
        hess = phi.T @ (phi * w[:, None]) + lam * np.eye(m)
        step = np.linalg.solve(hess, grad)
        f0 = _log_likelihood(theta, phi, counts, successes, lam)
        slope = float(grad @ step)
        # Below the objective's rounding floor the sufficient-decrease test
        # cannot resolve progress; the damped phase is over, take full steps.
        noise = 64.0 * np.finfo(float).eps * (1.0 + abs(f0))
        eta = 1.0
        if slope > noise:
            for _ in range(60):
                cand = theta + eta * step
                if _log_likelihood(cand, phi, counts, successes, lam) \
                        >= f0 + ARMIJO_C * eta * slope:
                    break
                eta *= 0.5
        theta = theta + eta * step
    z = phi @ theta
    grad = phi.T @ (successes - counts * sigmoid(z)) - lam * theta
    if float(np.linalg.norm(grad)) <= GRAD_TOL:
        return theta
    raise NoConvergence("Newton iterations exhausted before gradient tolerance")


def fit_mle(history: History, spec: ProblemSpec, lam: float) -> np.ndarray:
    """Maximize the regularized conversion log-likelihood of a history.

    Only rounds with a non-null action carry information.  The objective is
    smooth and strictly concave for lam > 0, so damped Newton with Armijo
    backtracking converges; the gradient norm at the returned point is below
    1e-10.  An empty (or all-null) history gives the zero vector.
    """
    if lam <= 0:
        raise ValueError("regularization must be positive")
    pair_index: dict = {}
    rows, counts, successes = [], [], []
    for rec in history.records:
        if rec.action_id == spec.null_action:
            continue
        key = (rec.action_id, rec.context_id)
        j = pair_index.get(key)
        if j is None:
            j = len(rows)
            pair_index[key] = j
            rows.append(spec.transfer[rec.action_id, rec.context_id])
            counts.append(0.0)
            successes.append(0.0)
        counts[j] += 1.0
        successes[j] += float(rec.y)
    phi = np.asarray(rows) if rows else np.zeros((0, spec.m))
    return _fit_aggregated(phi, np.asarray(counts), np.asarray(successes),
                           float(lam), spec.m)


def _calibration_map(state, theta):
    """Psi(theta): fitted success-mass map whose root-matching defines the fit."""
    p = sigmoid(state._phi @ theta)
    return state._phi.T @ (state._counts * p) + state.lam * theta


def _weight_matrix(state, theta):
    w = state._counts * sigmoid_slope(state._phi @ theta)
    return state.lam * np.eye(state.m) + state._phi.T @ (state._phi * w[:, None])


def project_theta(theta_tilde: np.ndarray, state: LogisticState) -> np.ndarray:
    """Best-effort projection of the fit onto the admissible ball.

    Returned unchanged when already inside.  Otherwise runs projected
    gradient descent on the weighted calibration mismatch
    ``|| Psi(theta) - Psi(theta_tilde) ||^2`` in the ``W(theta)^{-1}`` metric,
    accepting only steps that decrease the objective, and records the final
    objective value for diagnostics.
    """
    S = state.theta_bound
    norm = float(np.linalg.norm(theta_tilde))
    if norm <= S:
        state.last_projection_objective = 0.0
        return theta_tilde.copy()

    psi_target = _calibration_map(state, theta_tilde)
    phi, counts = state._phi, state._counts

    def objective_grad(theta):
        v = _calibration_map(state, theta) - psi_target
        W = _weight_matrix(state, theta)
        u = np.linalg.solve(W, v)
        f = float(v @ u)
        z = phi @ theta
        p = sigmoid(z)
        curv = counts * p * (1.0 - p) * (1.0 - 2.0 * p)
        proj = phi @ u
        grad = 2.0 * v - phi.T @ (curv * proj ** 2)
        return f, grad

    def clip(theta):
        n = float(np.linalg.norm(theta))
        return theta if n <= S else theta * (S / n)

    theta = clip(theta_tilde)
    f, grad = objective_grad(theta)
    step = 1.0 / (state.lam + float(counts.sum()) / 4.0 + 1.0)
    for _ in range(PGD_STEPS):
        eta = step
        moved = False
        for _ in range(30):
            cand = clip(theta - eta * grad)
            fc, gc = objective_grad(cand)
            if fc <= f:
                theta, f, grad = cand, fc, gc
                moved = True
                break
            eta *= 0.5
        if not moved:
            break
    state.last_projection_objective = f
    return theta


def refit(state: LogisticState) -> np.ndarray:
    """Refit the regularized estimate and project it; returns ``theta_hat``."""
    state.theta_mle = _fit_aggregated(
        state._phi, state._counts, state._successes, state.lam, state.m,
        theta0=state.theta_mle,
    )
    state.theta_hat = project_theta(state.theta_mle, state)
    return state.theta_hat


def confidence_radius(t: int, lam: float, delta: float, m: int,
                      theta_bound: float) -> float:
    """Self-normalized confidence radius after t rounds; increasing in t."""
    log_term = m * math.log(2.0) - math.log(delta) \
        + 0.5 * m * math.log1p(t / (4.0 * m * lam))
    return math.sqrt(lam) * (theta_bound + 0.5) + 2.0 / math.sqrt(lam) * log_term


def bonus(state: LogisticState, a: int, x: int) -> float:
    """Exploration width at (a, x) given the current design matrix."""
    phi = state.transfer[a, x]
    quad = max(float(phi @ state.V_inv @ phi), 0.0)
    radius = confidence_radius(state.round, state.lam, state.delta, state.m,
                               state.theta_bound)
    return radius * math.sqrt(state.kappa * (state.theta_bound + 0.5)) * math.sqrt(quad)


def upper_bound(state: LogisticState, a: int, x: int) -> ConfidenceBound:
    """Plug-in estimate and clipped optimistic conversion probability."""
    phi = state.transfer[a, x]
    p_hat = float(sigmoid(phi @ state.theta_hat))
    eps = bonus(state, a, x)
    return ConfidenceBound(p_hat, eps, min(p_hat + eps, 1.0))


def grid_estimates(state: LogisticState) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (p_hat, epsilon) tables over every (action, context) pair.

    The no-op row is zero in both tables.  Identical arithmetic to
    :func:`upper_bound`, evaluated for the whole grid at once.
    """
    n_a, n_x, _ = state.transfer.shape
    z = state.transfer @ state.theta_hat
    p_hat = sigmoid(z)
    quad = np.einsum("axm,mk,axk->ax", state.transfer, state.V_inv,
                     state.transfer)
    radius = confidence_radius(state.round, state.lam, state.delta, state.m,
                               state.theta_bound)
    eps = radius * math.sqrt(state.kappa * (state.theta_bound + 0.5)) \
        * np.sqrt(np.maximum(quad, 0.0))
    p_hat[state.null_action] = 0.0
    eps[state.null_action] = 0.0
    return p_hat, eps


def design_norms(state: LogisticState) -> np.ndarray:
    """Table of ||phi(a, x)||_{V^{-1}} over the grid (zero at the no-op)."""
    quad = np.einsum("axm,mk,axk->ax", state.transfer, state.V_inv,
                     state.transfer)
    norms = np.sqrt(np.maximum(quad, 0.0))
    norms[state.null_action] = 0.0
    return norms


def bonus_sum_bound(T: int, lam: float, delta: float, m: int,
                    theta_bound: float, kappa: float) -> float:
    """Deterministic cap on twice the sum of played exploration widths.

    Valid for any action sequence of length T, by the elliptic-potential
    argument applied to the design matrix accumulated from the played
    features.
    """
    radius = confidence_radius(T, lam, delta, m, theta_bound)
    potential = 2.0 * m * T * max(1.0, 1.0 / (kappa * lam)) \
        * math.log1p(T / (kappa * lam * m))
    return radius * math.sqrt(kappa * (4.0 * theta_bound + 2.0)) * math.sqrt(potential)
