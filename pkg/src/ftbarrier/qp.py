"""Minimum-effort control under stacked affine safety constraints.

Solves min u'u subject to xi_i + lambda_i' u >= 0.  Problems are tiny
(p <= 6 inputs, one row per trusted fault pattern), so an exact active-set
iteration beats an interior-point code and terminates with clean zeros for
the loss tests.  Infeasibility is a status, not an error.
"""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.optimize import linprog

FEAS_TOL = 1e-9
DUAL_TOL = 1e-10
ZERO_ROW_TOL = 1e-12
MAX_ITER = 100


@dataclass(frozen=True)
class FeasibilityRow:
    """One constraint xi + lambda' u >= 0 contributed by fault pattern ``pattern``.

    ``bhat`` is the shifted barrier value at the estimate the row was built
    from; the controller's activation gate drops rows deep inside the
    certified region.  It does not affect the solve.
    """

    lam: np.ndarray
    xi: float
    pattern: int = -1
    bhat: float = float("nan")

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "xi", float(self.xi))
        object.__setattr__(self, "bhat", float(self.bhat))
        if not (np.all(np.isfinite(lam)) and np.isfinite(self.xi)):
            raise ValueError("feasibility row entries must be finite")


@dataclass
class QpSolution:
    u: np.ndarray
    active_set: list
    status: str  # optimal | infeasible | unconstrained
    multipliers: np.ndarray = field(default=None)


def feasible(rows, u, tol=FEAS_TOL):
    """True iff xi_i + lambda_i' u >= -tol for every row."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return all(row.xi + float(row.lam @ u) >= -tol for row in rows)


def _bounds_rows(u_bounds, p):
    extra = []
    lo, hi = np.asarray(u_bounds[0], dtype=float), np.asarray(u_bounds[1], dtype=float)
    for j in range(p):
        e = np.zeros(p)
        if np.isfinite(lo[j]):
            e_lo = e.copy()
            e_lo[j] = 1.0
            extra.append(FeasibilityRow(lam=e_lo, xi=-lo[j], pattern=-1))
        if np.isfinite(hi[j]):
            e_hi = e.copy()
            e_hi[j] = -1.0
            extra.append(FeasibilityRow(lam=e_hi, xi=hi[j], pattern=-1))
    return extra


def _equality_solution(L, b):
    """min ||u||^2 s.t. L u = b, via u = L' mu with (L L') mu = b."""
    gram = L @ L.T
    mu, *_ = np.linalg.lstsq(gram, b, rcond=None)
    return L.T @ mu, mu


def _phase1_feasible(L, xi):
    """Linear-feasibility check: does any u satisfy L u >= -xi?"""
    m, p = L.shape
    c = np.zeros(p + 1)
    c[-1] = 1.0
    A_ub = np.hstack([-L, -np.ones((m, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=xi, bounds=[(None, None)] * p + [(0, None)], method="highs")
    return res.success and res.x is not None and res.x[-1] <= 1e-8


def _enumerate_solve(L, xi):
    """Exhaustive active-set search; fallback for degenerate instances."""
    m, p = L.shape
    best = None
    for size in range(1, min(m, p) + 1):
        for combo in combinations(range(m), size):
            idx = list(combo)
            u, mu = _equality_solution(L[idx], -xi[idx])
            if np.any(mu < -DUAL_TOL):
                continue
            if np.all(L @ u + xi >= -FEAS_TOL):
                if best is None or u @ u < best[0] @ best[0] - 1e-15:
                    best = (u, idx, mu)
    return best


def solve_min_norm(rows, u_bounds=None):
    """Minimum-norm u satisfying every row, or an infeasibility verdict.

    Returns u = 0 with status "unconstrained" when all xi >= 0.  Otherwise
    runs a primal active-set iteration seeded at 0: repeatedly add the most
    violated row, solve the equality-constrained projection, and drop rows
    with negative multipliers.  Cycling or iteration exhaustion triggers a
    phase-1 linear-feasibility re-check and, if the problem is feasible
    after all, an exhaustive search over active subsets.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("at least one feasibility row is required")
    p = rows[0].lam.shape[0]
    if u_bounds is not None:
        rows = rows + _bounds_rows(u_bounds, p)

    # Deduplicate exact copies and strip rows that no u can influence.
    seen = {}
    kept = []
    for row in rows:
        key = (row.lam.tobytes(), row.xi)
        if key in seen:
            continue
        seen[key] = True
        lam_norm = float(np.linalg.norm(row.lam))
        if lam_norm <= ZERO_ROW_TOL:
            if row.xi < 0.0:
                return QpSolution(u=np.zeros(p), active_set=[], status="infeasible",
                                  multipliers=np.zeros(len(rows)))
            continue  # vacuously satisfied
        kept.append(row)

    multipliers = np.zeros(len(rows))
    if not kept or all(row.xi >= 0.0 for row in kept):
        return QpSolution(u=np.zeros(p), active_set=[], status="unconstrained",
                          multipliers=multipliers)

    L = np.array([row.lam for row in kept])
    xi = np.array([row.xi for row in kept])

    work = []
    u = np.zeros(p)
    stalled = False
    for _ in range(MAX_ITER):
        slack = xi + L @ u
        worst = int(np.argmin(slack))
        if slack[worst] >= -FEAS_TOL:
            break
        if worst in work:
            stalled = True
            break
        work.append(worst)
        while True:
            u, mu = _equality_solution(L[work], -xi[work])
            if mu.size and np.min(mu) < -DUAL_TOL:
                work.pop(int(np.argmin(mu)))
                if not work:
                    u = np.zeros(p)
                    mu = np.zeros(0)
                    break
            else:
                break
    else:
        stalled = True

    if stalled or not np.all(xi + L @ u >= -FEAS_TOL):
        if not _phase1_feasible(L, xi):
            return QpSolution(u=np.zeros(p), active_set=[], status="infeasible",
                              multipliers=np.zeros(len(rows)))
        found = _enumerate_solve(L, xi)
        if found is None:
            return QpSolution(u=np.zeros(p), active_set=[], status="infeasible",
                              multipliers=np.zeros(len(rows)))
        u, work, mu = found

    # Map multipliers back onto the caller's row order.
    kept_ids = [id(row) for row in kept]
    row_pos = {id(row): i for i, row in enumerate(rows)}
    active_rows = []
    for w, m_val in zip(work, mu):
        orig = row_pos[kept_ids[w]]
        multipliers[orig] = max(0.0, float(m_val))
        active_rows.append(orig)
    return QpSolution(u=u, active_set=sorted(active_rows), status="optimal",
                      multipliers=multipliers)


def min_norm_shared_direction(xi, lam, budget=None):
    """Vectorised min-norm solve for constraint blocks sharing one direction.

    At a single state all fault-pattern rows share lambda = db/dx g(x), so
    the stacked program collapses to lambda' u >= -min_i xi_i.  ``xi`` is
    (N, m), ``lam`` is (N, p).  Returns (u, infeasible_mask); infeasible
    samples (zero direction, negative xi) get u = 0, matching the row-wise
    solver's worst-case convention.

    ``budget`` clips each input component to [-budget, budget].  Samples
    whose min-norm solution exceeds the budget keep the clipped best-effort
    input; the caller's penalty then measures the residual shortfall.
    """
    xi = np.asarray(xi, dtype=float)
    lam = np.asarray(lam, dtype=float)
    xi_min = xi.min(axis=1)
    norm_sq = np.einsum("ij,ij->i", lam, lam)
    need = xi_min < 0.0
    zero_dir = norm_sq <= ZERO_ROW_TOL ** 2
    infeasible = need & zero_dir
    scale = np.where(need & ~zero_dir, -xi_min / np.where(zero_dir, 1.0, norm_sq), 0.0)
    u = scale[:, None] * lam
    if budget is not None:
        u = np.clip(u, -budget, budget)
    return u, infeasible
