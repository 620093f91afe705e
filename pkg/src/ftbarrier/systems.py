"""Control-affine SDE plant, attacked measurement channel, Euler-Maruyama loop.

The plant is dx = (f(x) + g(x) u) dt + sigma dW and the measurement channel
emits increments dy = (c x + a) dt + nu dV, where ``a`` is an adversarial
signal supported on the active fault pattern's sensor rows.  Integration is
explicit Euler-Maruyama with a fixed step; callers pass unit normals and the
step scales them by sqrt(dt).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, IntegrationDivergedError


@dataclass(frozen=True)
class ControlAffineSdeSystem:
    """Plant description.  Immutable and shareable across threads.

    drift and input_map are callables on the state; diffusion and
    output_noise are held time-constant.  ``drift_jacobian``, when given,
    is the analytic Jacobian of f(x) + g(x) u with respect to x.
    """

    n: int
    p: int
    q: int
    drift: callable
    input_map: callable
    diffusion: np.ndarray
    output_matrix: np.ndarray
    output_noise: np.ndarray
    drift_jacobian: callable = None

    def __post_init__(self):
        if min(self.n, self.p, self.q) < 1:
            raise ConfigError("state, input and output dimensions must be >= 1")
        object.__setattr__(self, "diffusion", np.asarray(self.diffusion, dtype=float))
        object.__setattr__(self, "output_matrix", np.asarray(self.output_matrix, dtype=float))
        object.__setattr__(self, "output_noise", np.asarray(self.output_noise, dtype=float))
        if self.diffusion.shape != (self.n, self.n):
            raise ConfigError(f"diffusion must be {self.n}x{self.n}")
        if self.output_matrix.shape != (self.q, self.n):
            raise ConfigError(f"output matrix must be {self.q}x{self.n}")
        if self.output_noise.shape != (self.q, self.q):
            raise ConfigError(f"output noise must be {self.q}x{self.q}")

    def fbar(self, x, u):
        """Controlled drift f(x) + g(x) u."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return self.drift(x) + self.input_map(x) @ u


class ConstantBias:
    """Attack signal: a fixed offset on the targeted sensor rows."""

    def __init__(self, q, indices, value):
        self.a = np.zeros(q)
        self.a[list(indices)] = float(value)

    def __call__(self, t, x):
        return self.a


class GaussianBias:
    """Attack signal: per-step draw ~ N(mean, var) on the targeted rows.

    Deterministic once ``reseed`` is called with a run-specific generator.
    """

    def __init__(self, q, indices, mean, var):
        self.q = q
        self.indices = list(indices)
        self.mean = float(mean)
        self.std = float(np.sqrt(var))
        self._rng = np.random.Generator(np.random.Philox(0))

    def reseed(self, generator):
        self._rng = generator

    def __call__(self, t, x):
        a = np.zeros(self.q)
        a[self.indices] = self.mean + self.std * self._rng.standard_normal(len(self.indices))
        return a


class TimeFunction:
    """Attack signal computed by an arbitrary callable (t, x) -> R^q."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, t, x):
        return np.asarray(self.fn(t, x), dtype=float)


@dataclass
class AttackModel:
    """Known fault patterns plus the (hidden) active one.

    patterns[i] is the 0-based set of output rows the adversary may corrupt
    under pattern i; generators[i] produces the corresponding signal.  The
    signal is masked to the pattern support, so a sloppy generator can never
    leak outside its declared rows.
    """

    q: int
    patterns: list
    generators: list
    active: int = None

    def __post_init__(self):
        self.patterns = [frozenset(int(k) for k in pat) for pat in self.patterns]
        if not self.patterns:
            raise ConfigError("at least one fault pattern is required")
        if len(set(self.patterns)) != len(self.patterns):
            raise ConfigError("fault patterns must be distinct")
        for pat in self.patterns:
            if any(k < 0 or k >= self.q for k in pat):
                raise ConfigError(f"pattern {sorted(pat)} outside output range 0..{self.q - 1}")
        if len(self.generators) != len(self.patterns):
            raise ConfigError("one generator per pattern is required")
        masks = []
        for pat in self.patterns:
            mask = np.zeros(self.q)
            mask[sorted(pat)] = 1.0
            masks.append(mask)
        self._masks = masks

    @property
    def m(self):
        return len(self.patterns)

    def reseed(self, generator):
        for gen in self.generators:
            if hasattr(gen, "reseed"):
                gen.reseed(generator)

    def signal(self, t, x):
        """a_t for the active pattern, exactly zero outside its support."""
        if self.active is None:
            return np.zeros(self.q)
        raw = np.asarray(self.generators[self.active](t, x), dtype=float)
        return raw * self._masks[self.active]


def no_attack(q, patterns=((0,),)):
    """AttackModel with the given patterns, none active, zero generators."""
    gens = [ConstantBias(q, pat, 0.0) for pat in patterns]
    return AttackModel(q=q, patterns=list(patterns), generators=gens, active=None)


@dataclass(frozen=True)
class SafetySpec:
    """Safety region {x : h(x) >= 0} plus the sampling box."""

    h: callable
    state_box: np.ndarray

    def __post_init__(self):
        box = np.asarray(self.state_box, dtype=float)
        if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 1] <= box[:, 0]):
            raise ConfigError("state_box must be (n, 2) with lo < hi per axis")
        object.__setattr__(self, "state_box", box)

    @property
    def n(self):
        return self.state_box.shape[0]

    def contains(self, x):
        return bool(self.h(np.asarray(x, dtype=float)) >= 0.0)

    def h_many(self, X):
        X = np.asarray(X, dtype=float)
        return np.array([self.h(row) for row in X])


@dataclass
class SimClock:
    """Simulation time bookkeeping."""

    t: float
    dt: float
    rng_seed: int
    horizon: float

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ConfigError("dt must be positive")
        if self.horizon < self.t:
            raise ConfigError("horizon must not precede the start time")

    @property
    def num_steps(self):
        return int(round((self.horizon - self.t) / self.dt))


def step_state(system, x, u, dt, noise):
    """One Euler-Maruyama step of the state SDE.

    ``noise`` holds unit normals of length n; the sqrt(dt) scaling happens
    here.  Raises IntegrationDivergedError when the result is non-finite.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    noise = np.asarray(noise, dtype=float)
    x_next = x + system.fbar(x, u) * dt + system.diffusion @ (np.sqrt(dt) * noise)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationDivergedError("state integration diverged", state=x_next)
    return x_next


def step_output(system, attack, x, dt, noise, t=0.0):
    """Measured output increment dy over one step, with attack injection."""
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    a = attack.signal(t, x) if attack is not None else np.zeros(system.q)
    return (system.output_matrix @ x + a) * dt + system.output_noise @ (np.sqrt(dt) * noise)


@dataclass
class TrajectoryLog:
    """Per-step record of a simulated run.

    states has one more row than inputs/outputs; the last row is the
    terminal state.  ``extras`` holds optional per-step columns (estimator
    traces, barrier values, the trusted-pattern bitmask, ...), each aligned
    with states.
    """

    t: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    inputs: np.ndarray
    pattern_active: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def num_steps(self):
        return self.inputs.shape[0]

    def column_names(self):
        n = self.states.shape[1]
        q = self.outputs.shape[1]
        p = self.inputs.shape[1]
        cols = ["t"]
        cols += [f"x{i}" for i in range(n)]
        cols += [f"y{i}" for i in range(q)]
        cols += [f"u{i}" for i in range(p)]
        cols += ["pattern_active"]
        cols += list(self.extras.keys())
        return cols

    def to_csv(self, path):
        steps = self.num_steps
        pad = lambda arr, width: np.vstack([arr, np.zeros((1, width))])
        y = pad(self.outputs, self.outputs.shape[1])
        u = pad(self.inputs, self.inputs.shape[1])
        pat = np.concatenate([self.pattern_active, [-1]])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.column_names())
            for k in range(steps + 1):
                row = [_fmt(self.t[k])]
                row += [_fmt(v) for v in self.states[k]]
                row += [_fmt(v) for v in y[k]]
                row += [_fmt(v) for v in u[k]]
                row += [str(int(pat[k]))]
                for col in self.extras.values():
                    row.append(_fmt(col[k]))
                writer.writerow(row)


def _fmt(v):
    return format(float(v), ".17g")


def run_open_loop(system, attack, policy, clock, x0):
    """Simulate the plant under ``policy`` for the clock horizon.

    policy maps (t, list of output increments so far) -> u.  Bit-identical
    for identical (system, attack, seed, dt): plant, measurement and attack
    draws come from separate streams keyed by the clock seed.
    """
    steps = clock.num_steps
    plant_rng = rngmod.stream(clock.rng_seed, rngmod.PLANT)
    meas_rng = rngmod.stream(clock.rng_seed, rngmod.MEASUREMENT)
    if attack is not None:
        attack.reseed(rngmod.stream(clock.rng_seed, rngmod.ATTACK))

    x = np.asarray(x0, dtype=float).copy()
    t = clock.t
    ts = np.empty(steps + 1)
    xs = np.empty((steps + 1, system.n))
    ys = np.empty((steps, system.q))
    us = np.empty((steps, system.p))
    pats = np.empty(steps, dtype=int)
    active = -1 if attack is None or attack.active is None else attack.active

    history = []
    for k in range(steps):
        ts[k] = t
        xs[k] = x
        dy = step_output(system, attack, x, clock.dt, meas_rng.standard_normal(system.q), t=t)
        history.append(dy)
        u = np.atleast_1d(np.asarray(policy(t, history), dtype=float))
        ys[k] = dy
        us[k] = u
        pats[k] = active
        try:
            x = step_state(system, x, u, clock.dt, plant_rng.standard_normal(system.n))
        except IntegrationDivergedError as exc:
            exc.step = k
            raise
        t += clock.dt
    ts[steps] = t
    xs[steps] = x
    return TrajectoryLog(t=ts, states=xs, outputs=ys, inputs=us, pattern_active=pats)
