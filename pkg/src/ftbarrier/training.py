"""Barrier training: cell-sampled dataset, losses, gradient descent.

The objective, minimised over network parameters, is

    -Vol + lambda_f * sum_i Lf_i + lambda_c * Lc

where Vol rewards covering the safe region (sum of -relu(h) relu(-b)),
Lc penalises claiming unsafe states (sum of relu(-h) relu(b)), and Lf_i
penalises boundary-band samples where even the minimum-effort input cannot
hold pattern i's constraint xi_i + lambda' u >= 0.  The per-sample input
comes from the min-norm program over all pattern rows; the level shifts
bbar and the band membership are frozen between refreshes, so each epoch
descends an (exactly differentiated) deterministic function.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from . import rng as rngmod
from .barrier import BarrierMargins, BarrierNetwork
from .errors import ConfigError, EmptyBoxError, FtBarrierError
from .estimation import steady_state_gain
from .qp import min_norm_shared_direction


class TrainingAbortedError(FtBarrierError):
    """Loss became non-finite; carries the epoch and a parameter snapshot."""

    def __init__(self, message, epoch, params):
        super().__init__(message)
        self.epoch = epoch
        self.params = params


# ----------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------
@dataclass
class Dataset:
    samples: np.ndarray
    grid_length: np.ndarray
    seed: int

    @property
    def size(self):
        return self.samples.shape[0]


def _axis_cells(lo, hi, length):
    """Cell (center, half-width) pairs; the last cell may be truncated."""
    width = hi - lo
    full = int(math.floor(width / length + 1e-9))
    centers = [lo + (k + 0.5) * length for k in range(full)]
    halves = [0.5 * length] * full
    leftover = width - full * length
    if leftover > 1e-9 * length:
        centers.append(lo + full * length + 0.5 * leftover)
        halves.append(0.5 * leftover)
    if not centers:
        centers = [0.5 * (lo + hi)]
        halves = [0.5 * width]
    return np.array(centers), np.array(halves)


def sample_dataset(state_box, grid_length, seed):
    """One uniformly perturbed sample per grid cell of the state box.

    Cell centers are laid out at spacing ``grid_length`` per axis; each
    sample is the center plus a uniform offset within the cell, so the
    dataset covers the box without clustering.  Deterministic per seed.
    """
    box = np.asarray(state_box, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 1] <= box[:, 0]):
        raise EmptyBoxError("state box must have positive width on every axis")
    n = box.shape[0]
    lengths = np.broadcast_to(np.asarray(grid_length, dtype=float), (n,)).copy()
    if np.any(lengths <= 0):
        raise ConfigError("grid lengths must be positive")
    centers, halves = zip(*(_axis_cells(lo, hi, L) for (lo, hi), L in zip(box, lengths)))
    mesh_c = np.meshgrid(*centers, indexing="ij")
    mesh_h = np.meshgrid(*halves, indexing="ij")
    cpts = np.stack([m.ravel() for m in mesh_c], axis=1)
    hpts = np.stack([m.ravel() for m in mesh_h], axis=1)
    gen = rngmod.stream(seed, rngmod.DATASET)
    rho = gen.uniform(-1.0, 1.0, size=cpts.shape) * hpts
    return Dataset(samples=cpts + rho, grid_length=lengths, seed=int(seed))


# ----------------------------------------------------------------------
# configuration and reporting
# ----------------------------------------------------------------------
@dataclass
class TrainingConfig:
    lambda_f: float
    lambda_c: float
    gammas: list
    epochs: int
    step_size: float
    seed: int
    batch_size: int = None
    boundary_band: float = None       # eta; None derives it from the b range
    band_fraction: float = 0.05
    bbar_refresh_every: int = 25
    grad_clip: float = 10.0
    hidden: list = field(default_factory=lambda: [32, 32])
    bbar_resolution: int = 12
    convergence_tol: float = 1e-4
    convergence_patience: int = 10
    # Actuation budget for the feasibility-loss input.  The unbounded
    # min-norm program satisfies every constraint whenever db/dx g is
    # nonzero, starving the loss of gradient signal; a finite budget makes
    # band samples that would need extreme inputs register as violations,
    # which is what teaches the barrier to depend on the actuated
    # coordinates.  The runtime filter stays unbounded.
    u_budget: float = None
    # After descent, shift the output bias so no training sample is claimed
    # safe while unsafe.  Hairline samples (|h| ~ 1e-4) carry loss weights
    # too small for descent to clear; the shift closes them exactly at a
    # slight coverage cost.
    correctness_calibration: bool = True
    # Fixed-step plain descent limit-cycles around the hinge kinks and
    # stalls orders of magnitude above the convergence tolerance, so the
    # default optimiser is a deterministic Adam; "gd" remains selectable.
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # Plateau-triggered step halving damps any residual cycle in the tail.
    step_decay: float = 0.5
    plateau_patience: int = 25
    min_step_scale: float = 1.0 / 4096.0

    def __post_init__(self):
        if self.lambda_f < 0 or self.lambda_c < 0:
            raise ConfigError("loss weights must be non-negative")
        if any(g < 0 for g in self.gammas):
            raise ConfigError("gamma radii must be non-negative")
        if self.boundary_band is not None and self.boundary_band <= 0:
            raise ConfigError("boundary band must be positive")
        if self.epochs < 1 or self.step_size <= 0:
            raise ConfigError("epochs must be >= 1 and step_size positive")


def training_config_from_bundle(bundle, seed, baseline=False, **overrides):
    t = bundle.config["training"]
    gammas = ([bundle.config["controller"]["baseline_gamma"]] if baseline
              else list(bundle.config["controller"]["gammas"]))
    kwargs = dict(
        lambda_f=t["lambda_f"], lambda_c=t["lambda_c"], gammas=gammas,
        epochs=t["epochs"], step_size=t["step_size"], seed=seed,
        band_fraction=t["band_fraction"], bbar_refresh_every=t["bbar_refresh_every"],
        grad_clip=t["grad_clip"], hidden=list(t["hidden"]),
        bbar_resolution=t["bbar_resolution"], u_budget=t.get("u_budget"),
    )
    kwargs.update(overrides)
    return TrainingConfig(**kwargs)


@dataclass
class LossReport:
    epoch: int
    vol: float
    lf_per_pattern: list
    lc: float
    total: float


@dataclass
class TrainResult:
    net: BarrierNetwork
    history: list
    converged: bool
    infeasible_samples: int        # band samples where no input could help
    calibration_shift: float = 0.0  # output-bias shift applied after descent


# ----------------------------------------------------------------------
# constraint pieces
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class PatternFilterInfo:
    """Representative filter data for one fault pattern.

    ``excluded`` are the pattern's output rows; K is the steady-state gain
    of the filter that drops them (Riccati fixpoint at the box center).
    """

    excluded: frozenset
    gamma: float
    K: np.ndarray
    c_r: np.ndarray
    nu_r: np.ndarray

    @property
    def kc(self):
        return self.K @ self.c_r

    @property
    def trace_weight(self):
        M = self.K @ self.nu_r
        return 0.5 * (M @ M.T)


def representative_filters(bundle, baseline=False):
    """Steady-state (K, c, nu) per pattern at the box center."""
    from .estimation import exclude_sensors  # local to avoid cycle at import time

    box = bundle.safety.state_box
    center = 0.5 * (box[:, 0] + box[:, 1])
    if baseline:
        excl_sets = [frozenset()]
        gammas = [bundle.config["controller"]["baseline_gamma"]]
    else:
        excl_sets = [frozenset(pat) for pat in bundle.attack_patterns]
        gammas = bundle.gammas
    infos = []
    for excl, gamma in zip(excl_sets, gammas):
        K, _ = steady_state_gain(bundle.system, excl, center)
        c_r, nu_r, _ = exclude_sensors(bundle.system.output_matrix,
                                       bundle.system.output_noise, excl)
        infos.append(PatternFilterInfo(excluded=excl, gamma=gamma, K=K,
                                       c_r=c_r, nu_r=nu_r))
    return infos


def compute_xi(system, net, margins, xhat, K, c_r, nu_r, pattern):
    """Constraint offset xi for one pattern at one estimate.

    xi = db/dx f(x) + 1/2 tr(nu' K' d2b/dx2 K nu)
         - gamma |db/dx K c|_2 + (b(x) - bbar_gamma)
    """
    xhat = np.asarray(xhat, dtype=float)
    value = net.forward(xhat)
    grad = net.input_gradient(xhat)
    hess = net.input_hessian(xhat)
    gamma = margins.gammas[pattern]
    M = K @ nu_r
    drift_term = float(grad @ system.drift(xhat))
    trace_term = 0.5 * float(np.einsum("ij,ij->", hess, M @ M.T))
    norm_term = gamma * float(np.linalg.norm(grad @ (K @ c_r)))
    return drift_term + trace_term - norm_term + margins.bhat(value, pattern)


def _drift_rows(system, X):
    return np.array([system.drift(x) for x in X])


def _input_rows(system, X):
    return np.array([system.input_map(x) for x in X])


def _xi_batch(system, net, margins, X, infos, values=None, grads=None, hess=None):
    """xi (N, m), lambda rows (N, p), and the derivative caches."""
    X = np.asarray(X, dtype=float)
    if values is None or grads is None or hess is None:
        values, grads, hess = net.value_grad_hess_many(X)
    fX = _drift_rows(system, X)
    gX = _input_rows(system, X)
    lam = np.einsum("Ni,Nip->Np", grads, gX)
    drift_term = np.einsum("Ni,Ni->N", grads, fX)
    xi = np.empty((X.shape[0], len(infos)))
    for i, info in enumerate(infos):
        trace_term = np.einsum("Nij,ij->N", hess, info.trace_weight)
        v = grads @ info.kc
        norm_term = info.gamma * np.linalg.norm(v, axis=1)
        xi[:, i] = drift_term + trace_term - norm_term + (values - margins.bbars[i])
    return xi, lam, values, grads, hess, fX, gX


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------
def loss_volume(net, dataset, safety):
    """Coverage objective: sum of -relu(h) relu(-b); zero when D covers C."""
    b = net.value_many(dataset.samples)
    h = safety.h_many(dataset.samples)
    return float(-np.sum(np.maximum(h, 0.0) * np.maximum(-b, 0.0)))


def loss_correctness(net, dataset, safety):
    """Unsafe-claimed-safe penalty: sum of relu(-h) relu(b)."""
    b = net.value_many(dataset.samples)
    h = safety.h_many(dataset.samples)
    return float(np.sum(np.maximum(-h, 0.0) * np.maximum(b, 0.0)))


def band_masks(values, margins, eta):
    """Per-pattern boundary-band membership: -eta <= b <= bbar_i + eta."""
    return [(values >= -eta) & (values <= margins.bbars[i] + eta)
            for i in range(len(margins.gammas))]


def loss_feasibility(system, net, margins, dataset, infos, eta,
                     frozen_u=None, frozen_masks=None, budget=None):
    """Per-pattern feasibility penalties over the boundary band.

    For each band sample the minimum-effort input u* is solved over the
    stacked pattern rows (they share the direction db/dx g, so the program
    collapses to a closed form); the penalty is relu(-(xi_i + lam u*)).
    Samples with a zero direction and negative xi get u = 0, the
    worst-case convention, and are counted as infeasible.

    ``frozen_u``/``frozen_masks`` allow re-evaluating the exact function a
    training epoch descended (u* and band membership held fixed), which is
    what the finite-difference gradient oracle needs.
    """
    X = dataset.samples
    values = net.value_many(X)
    masks = frozen_masks if frozen_masks is not None else band_masks(values, margins, eta)
    union = np.zeros(X.shape[0], dtype=bool)
    for mask in masks:
        union |= mask
    lf = [0.0] * len(infos)
    if not union.any():
        return lf, 0, union, None
    idx = np.nonzero(union)[0]
    Xb = X[idx]
    xi, lam, *_ = _xi_batch(system, net, margins, Xb, infos,
                            values=None, grads=None, hess=None)
    if frozen_u is not None:
        u_star = frozen_u
        infeasible = np.zeros(len(idx), dtype=bool)
    else:
        u_star, infeasible = min_norm_shared_direction(xi, lam, budget=budget)
    w = xi + np.einsum("Np,Np->N", lam, u_star)[:, None]
    for i in range(len(infos)):
        sub = masks[i][idx]
        lf[i] = float(np.sum(np.maximum(-w[sub, i], 0.0)))
    return lf, int(infeasible.sum()), union, u_star


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------
def _auto_eta(values, fraction):
    spread = float(values.max() - values.min())
    return max(fraction * spread, 1e-6)


def _epoch_pass(system, net, margins, X, h_vals, infos, eta, cfg):
    """Loss values and the full parameter gradient for one epoch.

    Returns (vol, lf list, lc, gradient, infeasible count).  u*, band
    membership and bbar are treated as constants of the epoch.
    """
    values = net.value_many(X)
    if not np.all(np.isfinite(values)):
        raise TrainingAbortedError("barrier values non-finite", -1, net.param_vector())

    relu_h = np.maximum(h_vals, 0.0)
    relu_negh = np.maximum(-h_vals, 0.0)
    neg_b = values < 0.0
    pos_b = values > 0.0
    vol = float(-np.sum(relu_h * np.maximum(-values, 0.0)))
    lc = float(np.sum(relu_negh * np.maximum(values, 0.0)))
    n_claimed = int(np.sum(pos_b & (h_vals < 0.0)))

    # Value-path seeds for every sample: d(-Vol)/db and lambda_c dLc/db.
    seed_val = -relu_h * neg_b + cfg.lambda_c * relu_negh * pos_b
    grad = net.param_gradient_value_many(X, seed_val)

    masks = band_masks(values, margins, eta)
    union = np.zeros(X.shape[0], dtype=bool)
    for mask in masks:
        union |= mask
    lf = [0.0] * len(infos)
    n_infeasible = 0
    if union.any() and cfg.lambda_f > 0.0:
        idx = np.nonzero(union)[0]
        Xb = X[idx]
        xi, lam, vals_b, grads_b, hess_b, fX, gX = _xi_batch(
            system, net, margins, Xb, infos)
        u_star, infeasible = min_norm_shared_direction(xi, lam, budget=cfg.u_budget)
        n_infeasible = int(infeasible.sum())
        gu = np.einsum("Nip,Np->Ni", gX, u_star)     # g(x) u*, the lam-path seed
        w = xi + np.einsum("Np,Np->N", lam, u_star)[:, None]

        sv = np.zeros(len(idx))
        sg = np.zeros_like(grads_b)
        sh = np.zeros_like(hess_b)
        any_active = False
        for i, info in enumerate(infos):
            active = masks[i][idx] & (w[:, i] < 0.0)
            lf[i] = float(np.sum(np.maximum(-w[masks[i][idx], i], 0.0)))
            if not active.any():
                continue
            any_active = True
            coef = -cfg.lambda_f * active.astype(float)
            sv += coef
            v = grads_b @ info.kc
            v_norm = np.linalg.norm(v, axis=1)
            safe_norm = np.where(v_norm > 0.0, v_norm, 1.0)
            dnorm = (v / safe_norm[:, None]) @ info.kc.T
            sg += coef[:, None] * (fX - info.gamma * dnorm + gu)
            sh += coef[:, None, None] * info.trace_weight[None, :, :]
        if any_active:
            grad = grad + net.param_gradient_many(Xb, sv, sg, sh)

    total = -vol + cfg.lambda_f * sum(lf) + cfg.lambda_c * lc
    if not np.isfinite(total):
        raise TrainingAbortedError("loss non-finite", -1, net.param_vector())
    return vol, lf, lc, grad, n_infeasible, n_claimed


def train(net, dataset, config, bundle, infos=None):
    """Gradient descent of the composite barrier loss.

    The level shifts bbar (and the derived band width when automatic) are
    re-estimated every ``bbar_refresh_every`` epochs since they track the
    moving zero-level set.  Training stops early once lf + lc stays at or
    below ``convergence_tol`` for ``convergence_patience`` consecutive
    epochs.
    """
    cfg = config
    if infos is None:
        infos = representative_filters(bundle)
    if len(infos) != len(cfg.gammas):
        raise ConfigError("one gamma per pattern filter is required")
    X = dataset.samples
    h_vals = bundle.safety.h_many(X)
    box = bundle.safety.state_box

    history = []
    margins = None
    eta = cfg.boundary_band
    streak = 0
    converged = False
    worst_infeasible = 0
    stepper = _Stepper(cfg, net.param_count)
    best = (np.inf, np.inf)   # (unsafe-claimed-safe count, lf + lc)
    best_params = net.param_vector()
    since_best = 0
    for epoch in range(cfg.epochs):
        if margins is None or (cfg.bbar_refresh_every > 0
                               and epoch % cfg.bbar_refresh_every == 0):
            margins = BarrierMargins.from_net(net, cfg.gammas, box,
                                              resolution=cfg.bbar_resolution)
            if cfg.boundary_band is None:
                eta = _auto_eta(net.value_many(X), cfg.band_fraction)

        if cfg.batch_size:
            order = np.arange(X.shape[0])
            for start in range(0, X.shape[0], cfg.batch_size):
                sl = order[start:start + cfg.batch_size]
                *_, grad_b, _, _ = _epoch_pass(bundle.system, net, margins, X[sl],
                                               h_vals[sl], infos, eta, cfg)
                stepper.apply(net, grad_b)
            vol, lf, lc, _, n_inf, n_claimed = _epoch_pass(bundle.system, net, margins,
                                                           X, h_vals, infos, eta, cfg)
            theta_scored = net.param_vector()
        else:
            try:
                vol, lf, lc, grad, n_inf, n_claimed = _epoch_pass(
                    bundle.system, net, margins, X, h_vals, infos, eta, cfg)
            except TrainingAbortedError as exc:
                exc.epoch = epoch
                raise
            theta_scored = net.param_vector()  # the loss belongs to this iterate
            stepper.apply(net, grad)
        worst_infeasible = max(worst_infeasible, n_inf)
        total = -vol + cfg.lambda_f * sum(lf) + cfg.lambda_c * lc
        history.append(LossReport(epoch=epoch, vol=vol, lf_per_pattern=list(lf),
                                  lc=lc, total=total))
        constraint_loss = sum(lf) + lc
        score = (n_claimed, constraint_loss)
        if score < (best[0], best[1] - 1e-15):
            best = score
            best_params = theta_scored
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.plateau_patience:
                # Rewind to the best iterate before refining: shrinking the
                # step wherever the cycle happens to sit just freezes it.
                net.set_param_vector(best_params)
                stepper.shrink()
                since_best = 0
        if constraint_loss <= cfg.convergence_tol:
            streak += 1
            if streak >= cfg.convergence_patience:
                converged = True
                break
        else:
            streak = 0
    net.set_param_vector(best_params)
    shift = 0.0
    if cfg.correctness_calibration:
        unsafe = h_vals < 0.0
        if unsafe.any():
            worst = float(net.value_many(X)[unsafe].max())
            if worst > 0.0:
                shift = worst + 1e-12
                net.biases[-1][0] -= shift
    return TrainResult(net=net, history=history, converged=converged,
                       infeasible_samples=worst_infeasible,
                       calibration_shift=shift)


class _Stepper:
    """Clipped descent step; Adam moments or plain GD per the config."""

    def __init__(self, cfg, param_count):
        if cfg.optimizer not in ("adam", "gd"):
            raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")
        self.cfg = cfg
        self.scale = 1.0
        if cfg.optimizer == "adam":
            self.m = np.zeros(param_count)
            self.v = np.zeros(param_count)
            self.t = 0

    def shrink(self):
        self.scale = max(self.scale * self.cfg.step_decay, self.cfg.min_step_scale)
        if self.cfg.optimizer == "adam":
            self.m[...] = 0.0
            self.v[...] = 0.0
            self.t = 0

    def apply(self, net, grad):
        cfg = self.cfg
        norm = float(np.linalg.norm(grad))
        if cfg.grad_clip and norm > cfg.grad_clip:
            grad = grad * (cfg.grad_clip / norm)
        if cfg.optimizer == "gd":
            delta = grad
        else:
            self.t += 1
            self.m = cfg.adam_beta1 * self.m + (1 - cfg.adam_beta1) * grad
            self.v = cfg.adam_beta2 * self.v + (1 - cfg.adam_beta2) * grad * grad
            mhat = self.m / (1 - cfg.adam_beta1 ** self.t)
            vhat = self.v / (1 - cfg.adam_beta2 ** self.t)
            delta = mhat / (np.sqrt(vhat) + cfg.adam_eps)
        net.set_param_vector(net.param_vector() - cfg.step_size * self.scale * delta)


def write_loss_history(history, path):
    if not history:
        raise ValueError("empty training history")
    m = len(history[0].lf_per_pattern)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "vol"] + [f"lf_{i}" for i in range(m)] + ["lc", "total"])
        for rec in history:
            row = [rec.epoch, _g(rec.vol)]
            row += [_g(v) for v in rec.lf_per_pattern]
            row += [_g(rec.lc), _g(rec.total)]
            writer.writerow(row)


def _g(v):
    return format(float(v), ".17g")


# ----------------------------------------------------------------------
# estimator facade
# ----------------------------------------------------------------------
class BarrierTrainer(BaseEstimator):
    """Scikit-learn style wrapper around the training loop.

    Hyperparameters mirror the scenario's training defaults; ``fit`` draws
    the cell dataset (or accepts explicit estimate samples), trains the
    barrier and exposes it through ``decision_function`` (the barrier
    value) and ``predict`` (membership of the certified region).
    """

    def __init__(self, scenario="dubins", overrides=None, baseline=False,
                 grid_length=None, lambda_f=None, lambda_c=None, epochs=None,
                 step_size=None, seed=0):
        self.scenario = scenario
        self.overrides = overrides
        self.baseline = baseline
        self.grid_length = grid_length
        self.lambda_f = lambda_f
        self.lambda_c = lambda_c
        self.epochs = epochs
        self.step_size = step_size
        self.seed = seed

    def _bundle(self):
        from .scenarios import build_scenario
        return build_scenario(self.scenario, self.overrides)

    def fit(self, X=None, y=None):
        bundle = self._bundle()
        over = {}
        for key in ("lambda_f", "lambda_c", "epochs", "step_size"):
            val = getattr(self, key)
            if val is not None:
                over[key] = val
        config = training_config_from_bundle(bundle, self.seed,
                                             baseline=self.baseline, **over)
        length = self.grid_length or bundle.config["training"]["grid_length"]
        if X is None:
            dataset = sample_dataset(bundle.safety.state_box, length, self.seed)
        else:
            X = check_array(X, dtype=float)
            if X.shape[1] != bundle.system.n:
                raise ConfigError(f"samples must have width {bundle.system.n}")
            dataset = Dataset(samples=X, grid_length=np.broadcast_to(
                float(length), (bundle.system.n,)).copy(), seed=self.seed)
        net = BarrierNetwork([bundle.system.n] + list(config.hidden) + [1],
                             seed=self.seed)
        infos = representative_filters(bundle, baseline=self.baseline)
        result = train(net, dataset, config, bundle, infos=infos)
        self.net_ = result.net
        self.history_ = result.history
        self.converged_ = result.converged
        self.margins_ = BarrierMargins.from_net(
            result.net, config.gammas, bundle.safety.state_box,
            resolution=config.bbar_resolution)
        self.n_features_in_ = bundle.system.n
        return self

    def decision_function(self, X):
        self._check_fitted()
        X = check_array(X, dtype=float)
        return self.net_.value_many(X)

    def predict(self, X):
        return (self.decision_function(X) >= 0.0).astype(int)

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise ConfigError("trainer is not fitted; call fit() first")
