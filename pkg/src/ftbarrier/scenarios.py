"""Benchmark scenario bundles: Dubins obstacle avoidance and CWH rendezvous.

Each bundle packages the plant, the safety region, the fault patterns with
their attack signal defaults, and the training/controller parameter
defaults.  All numeric constants live in a nested config dict that
round-trips bit-exactly through the YAML scenario file.
"""

import copy
import math
from dataclasses import dataclass

import numpy as np
import yaml

from . import rng as rngmod
from .errors import ConfigError
from .systems import (AttackModel, ConstantBias, ControlAffineSdeSystem,
                      GaussianBias, SafetySpec)

CONFIG_VERSION = 1


@dataclass
class ScenarioBundle:
    """Immutable description of one benchmark problem."""

    name: str
    system: ControlAffineSdeSystem
    safety: SafetySpec
    attack_patterns: list
    config: dict

    def make_attack(self, active=None):
        cfg = self.config["attack"]
        gens = []
        for pat in self.attack_patterns:
            if cfg["kind"] == "constant":
                gens.append(ConstantBias(self.system.q, pat, cfg["bias"]))
            elif cfg["kind"] == "gaussian":
                gens.append(GaussianBias(self.system.q, pat, cfg["mean"], cfg["variance"]))
            else:
                raise ConfigError(f"unknown attack kind {cfg['kind']!r}")
        return AttackModel(q=self.system.q, patterns=list(self.attack_patterns),
                           generators=gens, active=active)

    def initial_state(self, generator):
        raise NotImplementedError

    def nominal_policy(self):
        """Task input policy acting on the full-filter estimate."""
        raise NotImplementedError

    @property
    def m(self):
        return len(self.attack_patterns)

    @property
    def gammas(self):
        return list(self.config["controller"]["gammas"])

    @property
    def alphas(self):
        raw = self.config["controller"]["alphas"]
        return {tuple(int(v) for v in key.split("_")): float(val) for key, val in raw.items()}

    def to_config(self):
        out = {"config_version": CONFIG_VERSION, "scenario": self.name}
        out.update(copy.deepcopy(self.config))
        return out


# ----------------------------------------------------------------------
# Dubins mobile robot
# ----------------------------------------------------------------------
def _dubins_defaults():
    return {
        "system": {
            "state_noise": 1e-3,          # sigma = state_noise * I3
            "output_variance": 1e-3,      # nu = sqrt(output_variance) * I5
        },
        "safety": {
            "obstacle_radius_sq": 0.04,   # pedestrian exclusion x1^2 + x2^2 >= 0.04
            "road_min_x2": -0.3,          # stay on the road: x2 >= -0.3
            "box": [[-2.0, 2.0], [-2.0, 2.0], [-2.0, 2.0]],
        },
        "attack": {
            "rows": [[1], [3]],           # duplicated GNSS channels of x1 and x2
            "kind": "constant",
            "bias": 1.0,
        },
        "training": {
            "grid_length": 0.125,
            "lambda_f": 1.0,
            "lambda_c": 1000.0,
            "epochs": 2000,
            "step_size": 1e-3,
            "grad_clip": 10.0,
            "bbar_refresh_every": 25,
            "band_fraction": 0.05,
            "hidden": [32, 32],
            "bbar_resolution": 12,
            "u_budget": 3.0,
        },
        "controller": {
            "gammas": [0.002, 0.0015],
            "alphas": {"0_1": 0.1},
            "delta": 0.1,
            "epsilon": 0.1,
            "residue_window": 20,
            "baseline_gamma": 0.002,
        },
        "simulation": {
            "dt": 0.01,
            "horizon": 4.0,
            "oracle_dt": 1e-3,
            "x0": [-1.0, -0.25, math.atan2(1.0, 0.25)],
        },
    }


class DubinsScenario(ScenarioBundle):
    def initial_state(self, generator):
        return np.asarray(self.config["simulation"]["x0"], dtype=float)

    def nominal_policy(self):
        return lambda t, xhat: np.zeros(1)


def dubins_scenario(overrides=None):
    """Unicycle robot avoiding a pedestrian while staying on the road.

    State (x1, x2, psi) with f = [sin psi, cos psi, 0], g = [0, 0, 1];
    one IMU plus two GNSS units give y = [x1, x1, x2, x2, psi].  Either
    duplicated GNSS row can be spoofed.
    """
    cfg = _merge(_dubins_defaults(), overrides)
    sysc, safc = cfg["system"], cfg["safety"]

    def drift(x):
        return np.array([math.sin(x[2]), math.cos(x[2]), 0.0])

    def input_map(x):
        return np.array([[0.0], [0.0], [1.0]])

    def drift_jacobian(x, u):
        return np.array([[0.0, 0.0, math.cos(x[2])],
                         [0.0, 0.0, -math.sin(x[2])],
                         [0.0, 0.0, 0.0]])

    c = np.array([[1.0, 0.0, 0.0],
                  [1.0, 0.0, 0.0],
                  [0.0, 1.0, 0.0],
                  [0.0, 1.0, 0.0],
                  [0.0, 0.0, 1.0]])
    system = ControlAffineSdeSystem(
        n=3, p=1, q=5,
        drift=drift, input_map=input_map, drift_jacobian=drift_jacobian,
        diffusion=sysc["state_noise"] * np.eye(3),
        output_matrix=c,
        output_noise=math.sqrt(sysc["output_variance"]) * np.eye(5),
    )

    r_sq = safc["obstacle_radius_sq"]
    x2_min = safc["road_min_x2"]

    def h(x):
        return min(x[0] * x[0] + x[1] * x[1] - r_sq, x[1] - x2_min)

    safety = SafetySpec(h=h, state_box=np.asarray(safc["box"], dtype=float))
    patterns = [tuple(rows) for rows in cfg["attack"]["rows"]]
    return DubinsScenario(name="dubins", system=system, safety=safety,
                          attack_patterns=patterns, config=cfg)


# ----------------------------------------------------------------------
# Clohessy-Wiltshire-Hill rendezvous
# ----------------------------------------------------------------------
def _cwh_defaults():
    return {
        "system": {
            "mean_motion": 0.056,
            "state_noise": 1e-3,
            "output_variance_diag": [1e-3, 1e-3, 1e-3, 1e-5, 1e-5, 1e-5, 1e-5, 1e-5],
        },
        "safety": {
            "r_min": 0.25,
            "r_max": 1.5,
            "box": [[-2.0, 2.0]] * 6,
        },
        "attack": {
            "rows": [[1], [3]],           # duplicated p_x and p_y channels
            "kind": "gaussian",
            "mean": -1.0,
            "variance": 0.1,
        },
        "training": {
            "grid_length": 1.0,
            "lambda_f": 1.0,
            "lambda_c": 1000.0,
            "epochs": 2000,
            "step_size": 1e-3,
            "grad_clip": 10.0,
            "bbar_refresh_every": 25,
            "band_fraction": 0.05,
            "hidden": [32, 32],
            "bbar_resolution": 8,
            "u_budget": 1.0,
        },
        "controller": {
            "gammas": [0.01, 0.01],
            "alphas": {"0_1": 0.1},
            "delta": 0.1,
            "epsilon": 0.1,
            "residue_window": 20,
            "baseline_gamma": 0.01,
        },
        "simulation": {
            "dt": 0.01,
            "horizon": 10.0,
            "oracle_dt": 1e-3,
            "initial_radius": [0.5, 1.2],
            "target_radius": 0.875,
            "nominal_kp": 0.25,
            "nominal_kd": 1.0,
        },
    }


def cwh_drift_matrix(mean_motion):
    """Block matrix [[0, I3], [A21, A22]] of the linearised relative motion."""
    n = mean_motion
    A = np.zeros((6, 6))
    A[0:3, 3:6] = np.eye(3)
    A[3, 0] = 3.0 * n * n
    A[3, 4] = 2.0 * n
    A[4, 3] = -2.0 * n
    A[5, 2] = -n * n
    return A


class CwhScenario(ScenarioBundle):
    def initial_state(self, generator):
        lo, hi = self.config["simulation"]["initial_radius"]
        direction = generator.standard_normal(3)
        direction /= np.linalg.norm(direction)
        radius = generator.uniform(lo, hi)
        return np.concatenate([radius * direction, np.zeros(3)])

    def nominal_policy(self):
        sim = self.config["simulation"]
        kp, kd, r_tgt = sim["nominal_kp"], sim["nominal_kd"], sim["target_radius"]

        def policy(t, xhat):
            pos, vel = xhat[:3], xhat[3:]
            r = float(np.linalg.norm(pos))
            target = r_tgt * pos / r if r > 1e-9 else np.array([r_tgt, 0.0, 0.0])
            return -kp * (pos - target) - kd * vel

        return policy


def cwh_scenario(overrides=None):
    """Chaser satellite holding a safe annulus around the target.

    Linear relative dynamics with mean motion n = 0.056; eight sensors
    duplicate p_x twice and p_y three times on top of the velocity channels,
    and either duplicated position row can be perturbed.
    """
    cfg = _merge(_cwh_defaults(), overrides)
    sysc, safc = cfg["system"], cfg["safety"]
    A = cwh_drift_matrix(sysc["mean_motion"])
    B = np.vstack([np.zeros((3, 3)), np.eye(3)])
    c = np.zeros((8, 6))
    for row, col in enumerate([0, 0, 1, 1, 1, 3, 4, 5]):
        c[row, col] = 1.0

    system = ControlAffineSdeSystem(
        n=6, p=3, q=8,
        drift=lambda x: A @ x,
        input_map=lambda x: B,
        drift_jacobian=lambda x, u: A,
        diffusion=sysc["state_noise"] * np.eye(6),
        output_matrix=c,
        output_noise=np.diag(np.sqrt(np.asarray(sysc["output_variance_diag"], dtype=float))),
    )

    r_min, r_max = safc["r_min"], safc["r_max"]

    def h(x):
        r = math.sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2])
        return min(r - r_min, r_max - r)

    safety = SafetySpec(h=h, state_box=np.asarray(safc["box"], dtype=float))
    patterns = [tuple(rows) for rows in cfg["attack"]["rows"]]
    return CwhScenario(name="cwh", system=system, safety=safety,
                       attack_patterns=patterns, config=cfg)


# ----------------------------------------------------------------------
# registry and config files
# ----------------------------------------------------------------------
_BUILDERS = {"dubins": dubins_scenario, "cwh": cwh_scenario}


def scenario_names():
    return sorted(_BUILDERS)


def build_scenario(name, overrides=None):
    if name not in _BUILDERS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {scenario_names()}")
    return _BUILDERS[name](overrides)


def scenario_from_config(cfg):
    cfg = copy.deepcopy(cfg)
    version = cfg.pop("config_version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version!r}")
    name = cfg.pop("scenario", None)
    return build_scenario(name, cfg)


def load_scenario_file(path):
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return scenario_from_config(cfg)


def dump_scenario_file(bundle, path):
    with open(path, "w") as fh:
        yaml.safe_dump(bundle.to_config(), fh, sort_keys=True)


def _merge(base, overrides):
    if not overrides:
        return base
    if not isinstance(overrides, dict):
        raise ConfigError("scenario overrides must be a mapping")
    out = copy.deepcopy(base)
    _merge_into(out, overrides)
    return out


def _merge_into(dst, src):
    for key, val in src.items():
        if key not in dst:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(dst[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            _merge_into(dst[key], val)
        else:
            dst[key] = copy.deepcopy(val)
