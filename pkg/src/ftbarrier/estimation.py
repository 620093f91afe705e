"""Extended Kalman filtering over sensor-exclusion subsets.

One filter runs on all q sensors, one per fault pattern runs on the
complement of that pattern's rows, and one per pattern pair runs on the
complement of the union.  Cross-checking their estimates is what lets the
controller decide which safety constraints to trust.

The estimate follows dxhat = (f(xhat) + g(xhat) u) dt + K (dy - c xhat dt)
with K = P c' R^-1, and P follows the Riccati flow
dP/dt = A P + P A' + Q - P c' R^-1 c P, both advanced by explicit Euler at
the simulation step.  P is re-symmetrised and eigenvalue-clamped after
every step; K is refreshed from the final P so K = P c' R^-1 always holds.
"""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import rng as rngmod
from .errors import (DegenerateObservationError, FilterDivergedError,
                     IllConditionedNoiseError)


def exclude_sensors(c, noise, excluded):
    """Restrict output matrix and noise to the non-excluded rows.

    Returns (c_kept, noise_kept, kept_indices); row order is preserved.
    Excluding every sensor is a degenerate observation model and raises.
    """
    c = np.asarray(c, dtype=float)
    noise = np.asarray(noise, dtype=float)
    q = c.shape[0]
    excluded = frozenset(int(k) for k in excluded)
    if any(k < 0 or k >= q for k in excluded):
        raise DegenerateObservationError(f"excluded indices outside 0..{q - 1}")
    kept = [k for k in range(q) if k not in excluded]
    if not kept:
        raise DegenerateObservationError("cannot exclude every sensor")
    return c[kept], noise[np.ix_(kept, kept)], tuple(kept)


def jacobian_fbar(system, xhat, u):
    """Jacobian of the controlled drift at (xhat, u).

    Uses the scenario's analytic Jacobian when available, otherwise central
    finite differences with per-coordinate step 1e-6 * max(1, |x_i|).
    """
    xhat = np.asarray(xhat, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if system.drift_jacobian is not None:
        return np.asarray(system.drift_jacobian(xhat, u), dtype=float)
    n = xhat.shape[0]
    J = np.empty((n, n))
    for i in range(n):
        step = 1e-6 * max(1.0, abs(xhat[i]))
        xp = xhat.copy()
        xm = xhat.copy()
        xp[i] += step
        xm[i] -= step
        J[:, i] = (system.fbar(xp, u) - system.fbar(xm, u)) / (2.0 * step)
    return J


@dataclass
class EkfState:
    """One filter: estimate, covariance, gain and its sensor subset."""

    xhat: np.ndarray
    P: np.ndarray
    sensors: tuple
    c_r: np.ndarray = field(repr=False, default=None)
    nu_r: np.ndarray = field(repr=False, default=None)
    R_inv: np.ndarray = field(repr=False, default=None)
    K: np.ndarray = None

    @classmethod
    def create(cls, system, excluded, xhat0, P0):
        c_r, nu_r, kept = exclude_sensors(system.output_matrix, system.output_noise, excluded)
        R = nu_r @ nu_r.T
        try:
            R_inv = np.linalg.inv(R)
        except np.linalg.LinAlgError as exc:
            raise IllConditionedNoiseError(
                f"singular restricted noise covariance for sensors {kept}") from exc
        if np.linalg.cond(R) > 1e12:
            raise IllConditionedNoiseError(
                f"restricted noise covariance for sensors {kept} is ill-conditioned")
        P = np.asarray(P0, dtype=float).copy()
        state = cls(xhat=np.asarray(xhat0, dtype=float).copy(), P=P,
                    sensors=kept, c_r=c_r, nu_r=nu_r, R_inv=R_inv)
        state.K = P @ c_r.T @ R_inv
        return state

    @property
    def q_kept(self):
        return len(self.sensors)

    def restrict(self, dy_full):
        return np.asarray(dy_full, dtype=float)[list(self.sensors)]


def _clamp_psd(P):
    P = 0.5 * (P + P.T)
    vals, vecs = np.linalg.eigh(P)
    if vals[0] < 0.0:
        P = (vecs * np.maximum(vals, 0.0)) @ vecs.T
        P = 0.5 * (P + P.T)
    return P


def ekf_step(state, system, u, dy_r, dt):
    """Advance one filter by one Euler step of the coupled estimate/Riccati flow.

    ``dy_r`` must already be restricted to this filter's sensor rows.  The
    estimate update uses the incoming gain; the stored gain is refreshed
    from the clamped covariance so the gain/covariance consistency
    invariant holds on exit.
    """
    xhat, P = state.xhat, state.P
    c_r, R_inv = state.c_r, state.R_inv
    dy_r = np.asarray(dy_r, dtype=float)

    A = jacobian_fbar(system, xhat, u)
    Q = system.diffusion @ system.diffusion.T
    innovation = dy_r - (c_r @ xhat) * dt
    xhat_next = xhat + system.fbar(xhat, u) * dt + state.K @ innovation

    PCt = P @ c_r.T
    P_next = P + dt * (A @ P + P @ A.T + Q - PCt @ R_inv @ PCt.T)
    P_next = _clamp_psd(P_next)
    K_next = P_next @ c_r.T @ R_inv

    if not (np.all(np.isfinite(xhat_next)) and np.all(np.isfinite(P_next))):
        raise FilterDivergedError("filter state became non-finite")
    return EkfState(xhat=xhat_next, P=P_next, sensors=state.sensors,
                    c_r=c_r, nu_r=state.nu_r, R_inv=R_inv, K=K_next)


@dataclass
class EkfBank:
    """1 + m + C(m,2) filters indexed by excluded sensor sets.

    ``full`` sees every sensor, ``per_pattern[i]`` excludes pattern i's
    rows, ``per_pair[(i, j)]`` excludes the union for i < j.
    """

    full: EkfState
    per_pattern: list
    per_pair: dict
    patterns: list

    @classmethod
    def create(cls, system, patterns, x0, seed, P0_scale=0.1, init_std=0.1):
        """Build the bank around the true initial state.

        Each filter starts at x0 plus an independent N(0, init_std^2 I)
        perturbation drawn from the FILTER_INIT stream, with P0 = P0_scale I.
        """
        patterns = [frozenset(pat) for pat in patterns]
        gen = rngmod.stream(seed, rngmod.FILTER_INIT)
        P0 = P0_scale * np.eye(system.n)
        perturb = lambda: np.asarray(x0, dtype=float) + init_std * gen.standard_normal(system.n)
        full = EkfState.create(system, frozenset(), perturb(), P0)
        per_pattern = [EkfState.create(system, pat, perturb(), P0) for pat in patterns]
        per_pair = {}
        for i, j in combinations(range(len(patterns)), 2):
            per_pair[(i, j)] = EkfState.create(system, patterns[i] | patterns[j], perturb(), P0)
        return cls(full=full, per_pattern=per_pattern, per_pair=per_pair,
                   patterns=patterns)

    @property
    def m(self):
        return len(self.per_pattern)

    @property
    def size(self):
        return 1 + len(self.per_pattern) + len(self.per_pair)

    def filters(self):
        """(filter_id, state) pairs in deterministic order."""
        yield "full", self.full
        for i, st in enumerate(self.per_pattern):
            yield f"p{i}", st
        for (i, j), st in sorted(self.per_pair.items()):
            yield f"p{i}_{j}", st


def bank_step(bank, system, dy_full, u, dt):
    """Advance every filter with its own restriction of the measured dy."""
    def advance(fid, state):
        try:
            return ekf_step(state, system, u, state.restrict(dy_full), dt)
        except FilterDivergedError as exc:
            exc.filter_id = fid
            raise
    full = advance("full", bank.full)
    per_pattern = [advance(f"p{i}", st) for i, st in enumerate(bank.per_pattern)]
    per_pair = {key: advance(f"p{key[0]}_{key[1]}", st)
                for key, st in bank.per_pair.items()}
    return EkfBank(full=full, per_pattern=per_pattern, per_pair=per_pair,
                   patterns=bank.patterns)


def pairwise_distance(bank, i, j):
    """(|xi - xj|, |xi - xij|, |xj - xij|) for patterns i < j."""
    if not i < j:
        raise ValueError("pairwise_distance expects i < j")
    xi = bank.per_pattern[i].xhat
    xj = bank.per_pattern[j].xhat
    xij = bank.per_pair[(i, j)].xhat
    return (float(np.linalg.norm(xi - xj)),
            float(np.linalg.norm(xi - xij)),
            float(np.linalg.norm(xj - xij)))


def residue(bank, i, y_window, dt):
    """Windowed output-prediction error of pattern i's filter.

    ``y_window`` holds recent raw (full-width) output increments, newest
    last.  Each is restricted to the filter's rows and compared against the
    current estimate's predicted increment.  An empty window means no
    measurement evidence, which scores zero.
    """
    state = bank.per_pattern[i]
    if len(y_window) == 0:
        return 0.0
    pred = (state.c_r @ state.xhat) * dt
    total = 0.0
    for dy in y_window:
        total += float(np.linalg.norm(state.restrict(dy) - pred))
    return total / len(y_window)


def steady_state_gain(system, excluded, x_ref, u=None, tol=1e-9, max_iter=200000):
    """Fixpoint of the Riccati flow at a representative state.

    Integrates dP/dt with an adaptive explicit Euler step until the flow
    stalls below ``tol`` (max-norm), then returns (K, P).  Used to pick the
    training-time representative gain for each pattern's filter.
    """
    c_r, nu_r, kept = exclude_sensors(system.output_matrix, system.output_noise, excluded)
    R = nu_r @ nu_r.T
    R_inv = np.linalg.inv(R)
    if u is None:
        u = np.zeros(system.p)
    A = jacobian_fbar(system, np.asarray(x_ref, dtype=float), u)
    Q = system.diffusion @ system.diffusion.T

    P = 0.1 * np.eye(system.n)
    step = 1e-3
    for _ in range(max_iter):
        PCt = P @ c_r.T
        dP = A @ P + P @ A.T + Q - PCt @ R_inv @ PCt.T
        rate = np.abs(dP).max()
        if rate < tol:
            break
        P_try = P + step * dP
        P_try = 0.5 * (P_try + P_try.T)
        vals = np.linalg.eigvalsh(P_try)
        if not np.all(np.isfinite(P_try)) or vals[0] < -1e-12 or vals[-1] > 1e6:
            step *= 0.5
            continue
        P = P_try
        step = min(step * 1.2, 0.5)
    else:
        raise FilterDivergedError("Riccati iteration did not reach a fixpoint")
    P = _clamp_psd(P)
    K = P @ c_r.T @ R_inv
    return K, P
