"""Per-round linear program over static context-to-action policies.

The program maximizes expected gain subject to d expected-budget rows and one
probability-mass row per context, relaxed to <= 1 (the no-op absorbs leftover
mass after solving).  A dense primal simplex with Bland's anti-cycling rule
solves it and exposes the dual variables from the final tableau, which a KKT
report then certifies.  A brute-force grid oracle covers tiny instances for
independent verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cbwk.errors import NumericalInstability, TooLarge

__all__ = [
    "LPProblem",
    "LPSolution",
    "KKTReport",
    "build_lp",
    "solve_lp",
    "check_kkt",
    "opt_oracle",
]

PIVOT_TOL = 1e-12
OPT_TOL = 1e-9
FEAS_TOL = 1e-9


@dataclass
class LPProblem:
    """One sampling program: gains, cost rates, weights, budget, horizon.

    ``gain`` and ``cost_rate`` are tables over (action, context) with the
    no-op row identically zero, which keeps the all-null policy feasible for
    any nonnegative budget.
    """

    nu: np.ndarray
    gain: np.ndarray
    cost_rate: np.ndarray
    budget: float
    horizon: int
    null_action: int

    @property
    def n_actions(self) -> int:
        return self.gain.shape[0]

    @property
    def n_contexts(self) -> int:
        return self.gain.shape[1]

    @property
    def d(self) -> int:
        return self.cost_rate.shape[2]

    def to_config(self) -> dict:
        return {
            "nu": self.nu.tolist(),
            "gain": self.gain.tolist(),
            "cost_rate": self.cost_rate.tolist(),
            "budget": self.budget,
            "horizon": self.horizon,
            "null_action": self.null_action,
        }

    @classmethod
    def from_config(cls, doc: dict) -> "LPProblem":
        return build_lp(
            np.asarray(doc["nu"], dtype=float),
            np.asarray(doc["gain"], dtype=float),
            np.asarray(doc["cost_rate"], dtype=float),
            float(doc["budget"]),
            int(doc["horizon"]),
            null_action=int(doc["null_action"]),
        )


@dataclass
class LPSolution:
    """Primal policy, optimal value, and the three dual families."""

    pi: np.ndarray                # (n_actions, n_contexts), columns sum to 1
    value: float
    dual_budget: np.ndarray       # shadow price per budget row, >= 0
    dual_simplex: np.ndarray      # shadow price per context mass row, >= 0
    dual_nonneg: np.ndarray       # reduced cost per (action, context), >= 0
    status: str                   # "optimal" | "degenerate-fallback"


@dataclass
class KKTReport:
    """Maximal residuals of the optimality conditions for one solve."""

    complementary_nonneg: float
    complementary_budget: float
    stationarity: float
    duality_lower: float
    duality_gap: float
    tol: float
    passed: bool

    def to_config(self) -> dict:
        return {
            "complementary_nonneg": self.complementary_nonneg,
            "complementary_budget": self.complementary_budget,
            "stationarity": self.stationarity,
            "duality_lower": self.duality_lower,
            "duality_gap": self.duality_gap,
            "tol": self.tol,
            "passed": self.passed,
        }


def build_lp(nu, gain, cost_rate, budget, horizon, null_action: int = 0) -> LPProblem:
    """Assemble and sanity-check one program.

    Enforces that ``nu`` is a probability vector, that every table is finite,
    and that the no-op row carries zero gain and zero cost (so feasibility
    never fails).
    """
    nu = np.asarray(nu, dtype=float)
    gain = np.asarray(gain, dtype=float)
    cost_rate = np.asarray(cost_rate, dtype=float)
    if cost_rate.ndim == 2:
        cost_rate = cost_rate[:, :, None]
    if abs(float(nu.sum()) - 1.0) > 1e-9 or np.any(nu < 0):
        raise ValueError("nu must be a probability vector")
    if not (np.all(np.isfinite(gain)) and np.all(np.isfinite(cost_rate))):
        raise ValueError("gain and cost tables must be finite")
    gain = gain.copy()
    cost_rate = cost_rate.copy()
    gain[null_action] = 0.0
    cost_rate[null_action] = 0.0
    return LPProblem(nu=nu, gain=gain, cost_rate=cost_rate,
                     budget=float(budget), horizon=int(horizon),
                     null_action=int(null_action))


def _fallback_solution(lp: LPProblem) -> LPSolution:
    pi = np.zeros((lp.n_actions, lp.n_contexts))
    pi[lp.null_action, :] = 1.0
    return LPSolution(
        pi=pi, value=0.0,
        dual_budget=np.zeros(lp.d),
        dual_simplex=np.zeros(lp.n_contexts),
        dual_nonneg=np.zeros((lp.n_actions, lp.n_contexts)),
        status="degenerate-fallback",
    )


def _simplex_max(A, b, c):
    """Primal simplex for max c.x s.t. A x <= b, x >= 0, with b >= 0.

    Entering and leaving choices both follow Bland's smallest-index rule, so
    the iteration terminates despite degeneracy.  Returns the primal point,
    the duals (bottom-row entries under the slack columns), the reduced
    costs of structural columns, and the optimal value.
    """
    n_rows, n_cols = A.shape
    T = np.zeros((n_rows + 1, n_cols + n_rows + 1))
    T[:n_rows, :n_cols] = A
    T[:n_rows, n_cols:n_cols + n_rows] = np.eye(n_rows)
    T[:n_rows, -1] = b
    T[-1, :n_cols] = -c
    basis = list(range(n_cols, n_cols + n_rows))
    scale = max(1.0, float(np.max(np.abs(c)))) if n_cols else 1.0
    tol = OPT_TOL * scale

    for _ in range(200 * (n_rows + n_cols) + 200):
        reduced = T[-1, :-1]
        entering = -1
        for j in range(n_cols + n_rows):
            if reduced[j] < -tol:
                entering = j
                break
        if entering < 0:
            x = np.zeros(n_cols + n_rows)
            for i, j in enumerate(basis):
                x[j] = T[i, -1]
            duals = T[-1, n_cols:n_cols + n_rows].copy()
            reduced_struct = T[-1, :n_cols].copy()
            return x[:n_cols], duals, reduced_struct, float(T[-1, -1])
        col = T[:n_rows, entering]
        leaving = -1
        best = np.inf
        for i in range(n_rows):
            if col[i] > PIVOT_TOL:
                ratio = T[i, -1] / col[i]
                if ratio < best - PIVOT_TOL or (
                        abs(ratio - best) <= PIVOT_TOL
                        and (leaving < 0 or basis[i] < basis[leaving])):
                    best = ratio
                    leaving = i
        if leaving < 0:
            raise NumericalInstability("no admissible pivot in entering column")
        pivot = T[leaving, entering]
        T[leaving] /= pivot
        for i in range(n_rows + 1):
            if i != leaving and T[i, entering] != 0.0:
                T[i] -= T[i, entering] * T[leaving]
        basis[leaving] = entering
    raise NumericalInstability("simplex iteration cap reached")


def solve_lp(lp: LPProblem) -> LPSolution:
    """Solve one program and recover the duals from the final tableau.

    A nonpositive budget short-circuits to the all-null policy with status
    ``degenerate-fallback``.  Leftover probability mass from the relaxed
    per-context rows is assigned to the no-op after solving.
    """
    if lp.budget <= 0.0:
        return _fallback_solution(lp)

    n_a, n_x, d = lp.n_actions, lp.n_contexts, lp.d
    n_vars = n_a * n_x
    T = float(lp.horizon)

    # Column order: context-major, action-minor; smallest index enters first.
    def col(x, a):
        return x * n_a + a

    c = np.zeros(n_vars)
    A = np.zeros((d + n_x, n_vars))
    b = np.zeros(d + n_x)
    for x in range(n_x):
        for a in range(n_a):
            j = col(x, a)
            c[j] = T * lp.nu[x] * lp.gain[a, x]
            A[:d, j] = T * lp.nu[x] * lp.cost_rate[a, x]
            A[d + x, j] = 1.0
    b[:d] = lp.budget
    b[d:] = 1.0

    x_opt, duals, reduced, value = _simplex_max(A, b, c)

    pi = np.zeros((n_a, n_x))
    for x in range(n_x):
        for a in range(n_a):
            pi[a, x] = x_opt[col(x, a)]
    pi = np.maximum(pi, 0.0)
    # Restore leftover mass of the relaxed rows to the no-op.
    leftover = 1.0 - pi.sum(axis=0)
    pi[lp.null_action] += np.maximum(leftover, 0.0)

    dual_budget = np.maximum(duals[:d], 0.0)
    dual_simplex = np.maximum(duals[d:], 0.0)
    dual_nonneg = np.zeros((n_a, n_x))
    for x in range(n_x):
        for a in range(n_a):
            dual_nonneg[a, x] = max(reduced[col(x, a)], 0.0)

    return LPSolution(pi=pi, value=value, dual_budget=dual_budget,
                      dual_simplex=dual_simplex, dual_nonneg=dual_nonneg,
                      status="optimal")


def expected_cost(lp: LPProblem, pi: np.ndarray) -> np.ndarray:
    """Expected cumulative spend T * E[sum_a cost * pi] per component."""
    weighted = lp.cost_rate * pi[:, :, None] * lp.nu[None, :, None]
    return lp.horizon * weighted.sum(axis=(0, 1))


def expected_gain(lp: LPProblem, pi: np.ndarray) -> float:
    """Expected cumulative gain T * E[sum_a gain * pi]."""
    return float(lp.horizon * (lp.gain * pi * lp.nu[None, :]).sum())


def check_kkt(lp: LPProblem, sol: LPSolution, tol: float = 1e-8) -> KKTReport:
    """Certify a solve by the maximal residuals of its optimality conditions.

    Residuals: nonnegativity complementary slackness per pair, budget
    complementary slackness, pairwise stationarity, the lower bound
    ``value >= budget * sum(dual_budget)``, and the strong-duality gap
    ``value - (budget * sum(dual_budget) + sum(dual_simplex))``.
    """
    T = float(lp.horizon)
    comp_nonneg = float(np.max(np.abs(sol.dual_nonneg * sol.pi)))

    spend = expected_cost(lp, sol.pi)
    comp_budget = abs(float(sol.dual_budget @ spend)
                      - lp.budget * float(sol.dual_budget.sum()))

    # Stationarity per (action, context), in the scaled tableau units.
    lhs = T * lp.gain * lp.nu[None, :]
    priced = T * np.einsum("axd,d->ax", lp.cost_rate, sol.dual_budget) \
        * lp.nu[None, :]
    stationarity = float(np.max(np.abs(
        lhs - (priced + sol.dual_simplex[None, :] - sol.dual_nonneg))))

    lower = lp.budget * float(sol.dual_budget.sum())
    duality_lower = max(0.0, lower - sol.value)
    duality_gap = abs(sol.value - (lower + float(sol.dual_simplex.sum())))

    residuals = [comp_nonneg, comp_budget, stationarity, duality_lower,
                 duality_gap]
    return KKTReport(
        complementary_nonneg=comp_nonneg,
        complementary_budget=comp_budget,
        stationarity=stationarity,
        duality_lower=duality_lower,
        duality_gap=duality_gap,
        tol=tol,
        passed=all(r <= tol for r in residuals),
    )


def opt_oracle(lp: LPProblem, grid_step: float) -> float:
    """Exhaustive grid search over tiny programs, for verification only.

    Enumerates every non-null probability entry on a regular grid, keeps the
    feasible points, and returns the best gain found.  At most 4 free
    variables are allowed.  The result never exceeds the true optimum and
    trails it by at most horizon * max-gain * step per free variable.
    """
    pairs = [(a, x) for x in range(lp.n_contexts)
             for a in range(lp.n_actions) if a != lp.null_action]
    n_free = len(pairs)
    if n_free > 4:
        raise TooLarge(f"{n_free} free variables exceed the oracle cap of 4")
    if lp.budget <= 0.0:
        return 0.0

    T = float(lp.horizon)
    levels = np.arange(0.0, 1.0 + grid_step / 2.0, grid_step)
    gain_coef = np.array([T * lp.nu[x] * lp.gain[a, x] for a, x in pairs])
    cost_coef = np.array([T * lp.nu[x] * lp.cost_rate[a, x] for a, x in pairs])
    ctx_of = [x for _, x in pairs]

    # The trailing (up to) 3 variables are enumerated as one vectorized
    # block, built once; any leading variable is scanned in an outer loop.
    n_tail = min(n_free, 3)
    n_head = n_free - n_tail
    grids = np.meshgrid(*([levels] * n_tail), indexing="ij")
    tail = np.stack([g.ravel() for g in grids], axis=1)
    obj_tail = tail @ gain_coef[n_head:]
    spend_tail = tail @ cost_coef[n_head:]
    ctx_sum_tail = {}
    for x in set(ctx_of):
        cols = [j - n_head for j in range(n_head, n_free) if ctx_of[j] == x]
        ctx_sum_tail[x] = tail[:, cols].sum(axis=1) if cols \
            else np.zeros(tail.shape[0])

    heads = [()] if n_head == 0 else [(v,) for v in levels]
    best = -np.inf
    for head in heads:
        head = np.asarray(head)
        head_obj = float(head @ gain_coef[:n_head]) if n_head else 0.0
        head_spend = head @ cost_coef[:n_head] if n_head else np.zeros(lp.d)
        ok = np.ones(tail.shape[0], dtype=bool)
        for i in range(lp.d):
            ok &= spend_tail[:, i] <= lp.budget + FEAS_TOL - head_spend[i]
        for x, sums in ctx_sum_tail.items():
            head_mass = sum(float(head[j]) for j in range(n_head)
                            if ctx_of[j] == x)
            ok &= sums <= 1.0 + FEAS_TOL - head_mass
        if ok.any():
            best = max(best, head_obj
                       + float(np.where(ok, obj_tail, -np.inf).max()))
    return max(best, 0.0)
