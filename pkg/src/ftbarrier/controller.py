"""Runtime safety filter with fault-pattern conflict resolution.

Each control step builds one affine constraint per trusted fault pattern,
evaluated at that pattern's own filter estimate with its live Kalman gain.
The minimum-effort input over the active constraints is applied; when the
constraints conflict, the trusted set Z is pruned: first by cross-checking
pattern estimates against the pairwise-exclusion filters, then by dropping
the filter with the largest measurement residue.  The trusted set resets
every step, so a transient disagreement never poisons the rest of the run.
"""

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .errors import ConfigError
from .estimation import EkfBank, bank_step, pairwise_distance, residue
from .qp import FeasibilityRow, solve_min_norm
from .systems import TrajectoryLog, step_output, step_state


@dataclass
class ControllerConfig:
    alphas: dict                   # {(i, j): conflict threshold}, i < j
    gammas: list
    delta: float                   # activation band: rows with bhat >= delta drop out
    epsilon: float                 # target violation probability (reporting only)
    margins: object                # BarrierMargins for the gammas above
    residue_window: int = 20
    sticky_removals: bool = False  # keep Z_t pruning across steps (experimental)
    blend_nominal: bool = False    # min |u - u_nominal|^2 instead of min |u|^2

    def __post_init__(self):
        if any(a <= 0 for a in self.alphas.values()):
            raise ConfigError("conflict thresholds must be positive")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in (0, 1)")

    def alpha(self, i, j):
        return self.alphas[(min(i, j), max(i, j))]


def controller_config_from_bundle(bundle, margins, **overrides):
    ctl = bundle.config["controller"]
    kwargs = dict(alphas=bundle.alphas, gammas=list(ctl["gammas"]),
                  delta=ctl["delta"], epsilon=ctl["epsilon"], margins=margins,
                  residue_window=ctl["residue_window"])
    kwargs.update(overrides)
    return ControllerConfig(**kwargs)


@dataclass
class ConflictState:
    """Trusted pattern set plus the cumulative removal log."""

    z: frozenset
    removals: list = field(default_factory=list)
    safety_degraded: bool = False


def build_rows(bank, net, margins, config, system, z=None):
    """One feasibility row per trusted pattern.

    Row i is evaluated at filter i's own estimate with its live gain:
    xi_i = db/dx f + 1/2 tr(nu' K' d2b/dx2 K nu) - gamma_i |db/dx K c|
           + (b - bbar_i),  lam_i = db/dx g.
    """
    indices = sorted(z) if z is not None else list(range(bank.m))
    if not indices:
        return []
    estimates = np.array([bank.per_pattern[i].xhat for i in indices])
    values, grads, hess = net.value_grad_hess_many(estimates)
    rows = []
    for pos, i in enumerate(indices):
        st = bank.per_pattern[i]
        grad = grads[pos]
        M = st.K @ st.nu_r
        drift_term = float(grad @ system.drift(st.xhat))
        trace_term = 0.5 * float(np.einsum("ij,ij->", hess[pos], M @ M.T))
        norm_term = margins.gammas[i] * float(np.linalg.norm(grad @ (st.K @ st.c_r)))
        xi = drift_term + trace_term - norm_term + margins.bhat(values[pos], i)
        lam = grad @ system.input_map(st.xhat)
        rows.append(FeasibilityRow(lam=lam, xi=xi, pattern=i,
                                   bhat=margins.bhat(values[pos], i)))
    return rows


def activation_gate(rows, margins, delta):
    """Keep only rows near the certified boundary (bhat < delta)."""
    return [row for row in rows if row.bhat < delta]


def _solve(rows, u_nominal, blend):
    if blend and u_nominal is not None:
        shifted = [replace(row, xi=row.xi + float(row.lam @ u_nominal)) for row in rows]
        sol = solve_min_norm(shifted)
        if sol.status != "infeasible":
            sol.u = sol.u + u_nominal
        return sol
    return solve_min_norm(rows)


def control_step(bank, net, config, state, y_window, system, t, dt, u_nominal=None):
    """One pass of the conflict-resolving safety filter.

    Returns (u, state').  ``u`` is None when every row is gated out, in
    which case the caller applies its nominal input.  The trusted set is
    re-initialised to all patterns at entry (unless sticky), shrinks
    monotonically within the step, and never empties.
    """
    z = set(state.z) if config.sticky_removals else set(range(bank.m))
    removals = list(state.removals)
    degraded = False

    def attempt(current_z):
        rows = build_rows(bank, net, config.margins, config, system, z=current_z)
        gated = activation_gate(rows, config.margins, config.delta)
        if not gated:
            return None, "gated"
        sol = _solve(gated, u_nominal, config.blend_nominal)
        return sol, sol.status

    sol, status = attempt(z)
    if status == "gated":
        return None, ConflictState(z=frozenset(z), removals=removals)
    if status != "infeasible":
        return sol.u, ConflictState(z=frozenset(z), removals=removals)

    # Step 2: prune by pairwise cross-checks against the two-exclusion filters.
    for i, j in sorted(config.alphas):
        if i not in z or j not in z:
            continue
        alpha = config.alpha(i, j)
        dist, d_i, d_j = pairwise_distance(bank, i, j)
        if dist <= alpha:
            continue
        if d_i > 0.5 * alpha and d_j > 0.5 * alpha:
            drop = i if d_i >= d_j else j
        elif d_i > 0.5 * alpha:
            drop = i
        elif d_j > 0.5 * alpha:
            drop = j
        else:
            continue
        z.discard(drop)
        removals.append({"t": t, "index": drop, "reason": "pairwise"})
        sol, status = attempt(z)
        if status != "infeasible":
            return (None if status == "gated" else sol.u), \
                ConflictState(z=frozenset(z), removals=removals)

    # Step 3: drop the largest-residue filters until something is feasible.
    while status == "infeasible" and len(z) > 1:
        drop = max(z, key=lambda i: residue(bank, i, y_window, dt))
        z.discard(drop)
        removals.append({"t": t, "index": drop, "reason": "residue"})
        sol, status = attempt(z)

    if status == "infeasible":
        degraded = True  # single pattern left, zero input direction, xi < 0
        u = np.zeros(system.p)
    elif status == "gated":
        u = None
    else:
        u = sol.u
    return u, ConflictState(z=frozenset(z), removals=removals,
                            safety_degraded=degraded)


@dataclass
class RunVerdict:
    seed: int
    controller: str
    attack_pattern: int
    min_h: float
    safe: bool
    removals: list
    safety_degraded_steps: int
    sup_est_error: dict
    max_pairwise_distance: float

    def to_dict(self):
        return {
            "seed": self.seed,
            "controller": self.controller,
            "attack_pattern": self.attack_pattern,
            "min_h": self.min_h,
            "safe": self.safe,
            "removals": self.removals,
            "safety_degraded_steps": self.safety_degraded_steps,
            "sup_est_error": self.sup_est_error,
            "max_pairwise_distance": self.max_pairwise_distance,
        }


def run_closed_loop(bundle, net, config, seed, nominal_policy=None,
                    attack_active=None, controller="ft", dt=None, horizon=None,
                    baseline_margins=None):
    """Simulate the plant under the safety filter for one seeded run.

    ``controller`` is "ft" (bank of filters plus conflict resolution) or
    "baseline" (single full-sensor filter, single constraint, no conflict
    handling).  The applied input is the filter's output when any
    constraint row is active and the nominal task input otherwise.  The
    safety verdict is min over the true trajectory of h.
    """
    system = bundle.system
    sim = bundle.config["simulation"]
    dt = dt if dt is not None else sim["dt"]
    horizon = horizon if horizon is not None else sim["horizon"]
    steps = int(round(horizon / dt))
    nominal = nominal_policy if nominal_policy is not None else bundle.nominal_policy()

    x0 = bundle.initial_state(rngmod.stream(seed, rngmod.INITIAL_STATE))
    attack = bundle.make_attack(active=attack_active)
    attack.reseed(rngmod.stream(seed, rngmod.ATTACK))
    plant_rng = rngmod.stream(seed, rngmod.PLANT)
    meas_rng = rngmod.stream(seed, rngmod.MEASUREMENT)

    if controller == "ft":
        bank = EkfBank.create(system, bundle.attack_patterns, x0, seed)
        margins = config.margins
    elif controller == "baseline":
        bank = EkfBank.create(system, [], x0, seed)
        margins = baseline_margins
        if margins is None:
            raise ConfigError("baseline runs need baseline_margins")
    else:
        raise ConfigError(f"unknown controller kind {controller!r}")

    y_window = deque(maxlen=config.residue_window)
    state = ConflictState(z=frozenset(range(bank.m)))
    m = bank.m

    ts = np.empty(steps + 1)
    xs = np.empty((steps + 1, system.n))
    ys = np.empty((steps, system.q))
    us = np.empty((steps, system.p))
    pats = np.full(steps, -1 if attack_active is None else attack_active, dtype=int)
    fids = [fid for fid, _ in bank.filters()]
    est_cols = {f"xhat_{fid}_{d}": np.empty(steps + 1)
                for fid in fids for d in range(system.n)}
    z_col = np.empty(steps + 1)
    h_col = np.empty(steps + 1)
    b_col = np.empty(steps + 1)

    def record(k, x, current_bank, z_set):
        ts[k] = k * dt
        xs[k] = x
        for fid, st in current_bank.filters():
            for d in range(system.n):
                est_cols[f"xhat_{fid}_{d}"][k] = st.xhat[d]
        z_col[k] = float(sum(1 << i for i in z_set))
        h_col[k] = bundle.safety.h(x)
        b_col[k] = net.forward(current_bank.full.xhat)

    sup_err = {fid: 0.0 for fid in fids}
    max_pair_dist = 0.0
    degraded_steps = 0
    x = x0.copy()
    record(0, x, bank, range(m))

    for k in range(steps):
        t = k * dt
        dy = step_output(system, attack, x, dt, meas_rng.standard_normal(system.q), t=t)
        u_cmd = nominal(t, bank.full.xhat)
        bank = bank_step(bank, system, dy, u_cmd, dt)
        y_window.append(dy)

        for fid, st in bank.filters():
            sup_err[fid] = max(sup_err[fid], float(np.linalg.norm(st.xhat - x)))
        for i in range(m):
            for j in range(i + 1, m):
                max_pair_dist = max(max_pair_dist, pairwise_distance(bank, i, j)[0])

        if controller == "ft":
            u_nom = np.atleast_1d(np.asarray(nominal(t, bank.full.xhat), dtype=float))
            u, state = control_step(bank, net, config, state, y_window, system,
                                    t, dt, u_nominal=u_nom)
            if state.safety_degraded:
                degraded_steps += 1
            u_applied = u_nom if u is None else u
            z_now = state.z
        else:
            u_nom = np.atleast_1d(np.asarray(nominal(t, bank.full.xhat), dtype=float))
            u_applied, was_degraded = _baseline_input(bank, net, margins, config,
                                                      system, u_nom)
            degraded_steps += int(was_degraded)
            z_now = range(m)

        ys[k] = dy
        us[k] = u_applied
        x = step_state(system, x, u_applied, dt, plant_rng.standard_normal(system.n))
        record(k + 1, x, bank, z_now)

    extras = dict(est_cols)
    extras["z_t"] = z_col
    extras["h"] = h_col
    extras["b_full"] = b_col
    log = TrajectoryLog(t=ts, states=xs, outputs=ys, inputs=us,
                        pattern_active=pats, extras=extras)
    min_h = float(h_col.min())
    verdict = RunVerdict(
        seed=int(seed), controller=controller,
        attack_pattern=-1 if attack_active is None else int(attack_active),
        min_h=min_h, safe=bool(min_h >= 0.0),
        removals=state.removals, safety_degraded_steps=degraded_steps,
        sup_est_error={fid: float(v) for fid, v in sup_err.items()},
        max_pairwise_distance=float(max_pair_dist),
    )
    return log, verdict


def _baseline_input(bank, net, margins, config, system, u_nominal):
    """Single-constraint filter on the full-sensor estimate."""
    st = bank.full
    x = st.xhat
    value = net.forward(x)
    grad = net.input_gradient(x)
    hess = net.input_hessian(x)
    M = st.K @ st.nu_r
    gamma = margins.gammas[0]
    xi = (float(grad @ system.drift(x))
          + 0.5 * float(np.einsum("ij,ij->", hess, M @ M.T))
          - gamma * float(np.linalg.norm(grad @ (st.K @ st.c_r)))
          + margins.bhat(value, 0))
    lam = grad @ system.input_map(x)
    row = FeasibilityRow(lam=lam, xi=xi, pattern=0, bhat=margins.bhat(value, 0))
    gated = activation_gate([row], margins, config.delta)
    if not gated:
        return u_nominal, False
    sol = _solve(gated, u_nominal, config.blend_nominal)
    if sol.status == "infeasible":
        return np.zeros(system.p), True
    return sol.u, False
