"""Neural barrier function with exact input and parameter derivatives.

A small fully-connected network b(x) with a smooth activation.  Safety
constraints need b, db/dx and the input Hessian d2b/dx2 at many states, and
training needs dLoss/dtheta where the loss touches all three, so the module
implements:

  * forward propagation of the value together with first and second input
    derivatives (layer-wise Jacobian and Hessian recursions), and
  * a reverse sweep that, given the partial derivatives of a scalar loss
    with respect to (value, gradient, Hessian) at each sample, accumulates
    the exact parameter gradient.

The activation must be C^2; tanh is the default and ships with the third
derivative needed by the reverse sweep.  Everything is float64 and batched
over samples.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ConfigError

FORMAT_MAGIC = b"FTBN"
FORMAT_VERSION = 1


def _tanh_d(z):
    t = np.tanh(z)
    d1 = 1.0 - t * t
    d2 = -2.0 * t * d1
    d3 = -2.0 * d1 * (1.0 - 3.0 * t * t)
    return t, d1, d2, d3


# activation tag -> (value-and-derivatives, is C2)
_ACTIVATIONS = {"tanh": _tanh_d}


class BarrierNetwork:
    """Fully-connected scalar-output network b(x).

    ``layer_sizes`` lists [n, h1, ..., hL, 1]; hidden layers use the smooth
    activation, the output layer is linear.  Parameters live in
    ``weights``/``biases`` and flatten to a single vector in row-major
    layer order for optimisation and persistence.
    """

    def __init__(self, layer_sizes, activation="tanh", seed=0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or sizes[-1] != 1 or any(s < 1 for s in sizes):
            raise ConfigError("layer_sizes must be [n, h1, ..., 1]")
        if activation not in _ACTIVATIONS:
            raise ConfigError(f"activation {activation!r} is not a known C^2 nonlinearity")
        self.layer_sizes = sizes
        self.activation = activation
        self._act = _ACTIVATIONS[activation]
        gen = rngmod.stream(seed, rngmod.NET_INIT)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(scale * gen.standard_normal((fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    # ------------------------------------------------------------------
    # parameter vector plumbing
    # ------------------------------------------------------------------
    @property
    def n(self):
        return self.layer_sizes[0]

    @property
    def param_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def param_vector(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_param_vector(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.param_count,):
            raise ConfigError("parameter vector has the wrong length")
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = theta[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = theta[pos:pos + b.size]
            pos += b.size

    def copy(self):
        clone = BarrierNetwork(self.layer_sizes, activation=self.activation, seed=0)
        clone.set_param_vector(self.param_vector())
        return clone

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------
    def value_many(self, X):
        A = np.asarray(X, dtype=float)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            A = np.tanh(A @ w.T + b) if self.activation == "tanh" else self._act(A @ w.T + b)[0]
        out = A @ self.weights[-1].T + self.biases[-1]
        return out[:, 0]

    def forward(self, x):
        return float(self.value_many(np.asarray(x, dtype=float)[None, :])[0])

    def gradient_many(self, X):
        return self._propagate(X, order=1)[1]

    def input_gradient(self, x):
        return self.gradient_many(np.asarray(x, dtype=float)[None, :])[0]

    def hessian_many(self, X):
        return self._propagate(X, order=2)[2]

    def input_hessian(self, x):
        return self.hessian_many(np.asarray(x, dtype=float)[None, :])[0]

    def value_grad_hess_many(self, X):
        """(values, gradients, Hessians) in one propagation pass."""
        vals, grads, hess, _ = self._propagate(X, order=2, keep_cache=False)
        return vals, grads, hess

    def _propagate(self, X, order, keep_cache=False):
        """Run the joint value/Jacobian/Hessian recursion over a batch.

        Hidden layer l keeps, per unit k: pre-activation z, Jacobian row
        S = dz/dx, curvature U = d2z/dx2, the activated a, G = da/dx and
        T = d2a/dx2.  The linear output layer contracts the final (a, G, T)
        with its weight row.
        """
        X = np.asarray(X, dtype=float)
        N, n = X.shape
        A = X
        G = np.broadcast_to(np.eye(n), (N, n, n)).copy() if order >= 1 else None
        T = np.zeros((N, n, n, n)) if order >= 2 else None
        cache = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            Z = A @ w.T + b
            act, d1, d2, _ = self._act(Z)
            S = np.einsum("kh,Nhi->Nki", w, G) if order >= 1 else None
            U = np.einsum("kh,Nhij->Nkij", w, T) if order >= 2 else None
            if keep_cache:
                cache.append((A, G, T, Z, S, U))
            newT = None
            if order >= 2:
                newT = d2[:, :, None, None] * np.einsum("Nki,Nkj->Nkij", S, S) \
                    + d1[:, :, None, None] * U
            A = act
            G = d1[:, :, None] * S if order >= 1 else None
            T = newT
        w_out, b_out = self.weights[-1], self.biases[-1]
        vals = (A @ w_out.T + b_out)[:, 0]
        grads = np.einsum("k,Nki->Ni", w_out[0], G) if order >= 1 else None
        hess = np.einsum("k,Nkij->Nij", w_out[0], T) if order >= 2 else None
        if keep_cache:
            cache.append((A, G, T))
        return vals, grads, hess, cache

    # ------------------------------------------------------------------
    # parameter gradient (reverse sweep over the derivative recursion)
    # ------------------------------------------------------------------
    def param_gradient_many(self, X, seed_value, seed_grad, seed_hess):
        """Sum over the batch of dLoss/dtheta.

        Seeds are the partial derivatives of the scalar loss with respect
        to the per-sample value (N,), input gradient (N, n) and input
        Hessian (N, n, n).  The result is linear in the seeds.
        """
        X = np.asarray(X, dtype=float)
        N, n = X.shape
        sv = np.asarray(seed_value, dtype=float).reshape(N)
        sg = np.asarray(seed_grad, dtype=float).reshape(N, n)
        sh = np.asarray(seed_hess, dtype=float).reshape(N, n, n)

        _, _, _, cache = self._propagate(X, order=2, keep_cache=True)
        A_last, G_last, T_last = cache[-1]
        w_out = self.weights[-1]

        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)

        # Output layer: value = w A + b, grad = w G, hess = w T.
        grads_w[-1] = (sv @ A_last + np.einsum("Nd,Nkd->k", sg, G_last)
                       + np.einsum("Nij,Nkij->k", sh, T_last))[None, :]
        grads_b[-1] = np.array([sv.sum()])
        bar_a = sv[:, None] * w_out[0][None, :]
        bar_G = np.einsum("k,Nd->Nkd", w_out[0], sg)
        bar_T = np.einsum("k,Nij->Nkij", w_out[0], sh)

        for l in range(len(self.weights) - 2, -1, -1):
            A_in, G_in, T_in, Z, S, U = cache[l]
            _, d1, d2, d3 = self._act(Z)
            gS = np.einsum("Nkd,Nkd->Nk", bar_G, S)
            tSS = np.einsum("Nkij,Nki,Nkj->Nk", bar_T, S, S)
            tU = np.einsum("Nkij,Nkij->Nk", bar_T, U)
            bar_z = bar_a * d1 + gS * d2 + tSS * d3 + tU * d2
            bar_T_sym = bar_T + np.swapaxes(bar_T, -1, -2)
            bar_S = d1[:, :, None] * bar_G + d2[:, :, None] * np.einsum("Nkij,Nkj->Nki", bar_T_sym, S)
            bar_U = d1[:, :, None, None] * bar_T

            w = self.weights[l]
            gw = np.einsum("Nk,Nc->kc", bar_z, A_in)
            gw += np.einsum("Nkd,Ncd->kc", bar_S, G_in)
            if T_in is not None and T_in.any():
                gw += np.einsum("Nkij,Ncij->kc", bar_U, T_in)
            grads_w[l] = gw
            grads_b[l] = bar_z.sum(axis=0)

            if l > 0:
                bar_a = np.einsum("kc,Nk->Nc", w, bar_z)
                bar_G = np.einsum("kc,Nkd->Ncd", w, bar_S)
                bar_T = np.einsum("kc,Nkij->Ncij", w, bar_U)

        parts = []
        for gw, gb in zip(grads_w, grads_b):
            parts.append(gw.ravel())
            parts.append(gb.ravel())
        return np.concatenate(parts)

    def param_gradient(self, x, seed_value, seed_grad, seed_hess):
        x = np.asarray(x, dtype=float)[None, :]
        return self.param_gradient_many(
            x, np.array([seed_value]), np.asarray(seed_grad)[None, :],
            np.asarray(seed_hess)[None, :, :])

    def param_gradient_value_many(self, X, seed_value):
        """Value-seed-only parameter gradient (plain backprop, no Hessian sweep).

        Equals param_gradient_many with zero gradient/Hessian seeds but
        skips the second-order recursion; used on the bulk of a training
        batch where the loss touches only b itself.
        """
        X = np.asarray(X, dtype=float)
        sv = np.asarray(seed_value, dtype=float).reshape(X.shape[0])
        acts = [X]
        zs = []
        A = X
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            Z = A @ w.T + b
            zs.append(Z)
            A = self._act(Z)[0]
            acts.append(A)
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        grads_w[-1] = (sv @ acts[-1])[None, :]
        grads_b[-1] = np.array([sv.sum()])
        bar_a = sv[:, None] * self.weights[-1][0][None, :]
        for l in range(len(self.weights) - 2, -1, -1):
            d1 = self._act(zs[l])[1]
            bar_z = bar_a * d1
            grads_w[l] = bar_z.T @ acts[l]
            grads_b[l] = bar_z.sum(axis=0)
            if l > 0:
                bar_a = bar_z @ self.weights[l]
        parts = []
        for gw, gb in zip(grads_w, grads_b):
            parts.append(gw.ravel())
            parts.append(gb.ravel())
        return np.concatenate(parts)

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------
    def save(self, path):
        """Self-describing flat file: header + little-endian float64 body."""
        tag = self.activation.encode("ascii")
        with open(path, "wb") as fh:
            fh.write(FORMAT_MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<B", len(tag)))
            fh.write(tag)
            fh.write(struct.pack("<I", len(self.layer_sizes)))
            fh.write(struct.pack(f"<{len(self.layer_sizes)}I", *self.layer_sizes))
            fh.write(self.param_vector().astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != FORMAT_MAGIC:
                raise ConfigError(f"{path}: not a barrier model file")
            version, = struct.unpack("<I", fh.read(4))
            if version != FORMAT_VERSION:
                raise ConfigError(f"{path}: unsupported model format version {version}")
            tag_len, = struct.unpack("<B", fh.read(1))
            tag = fh.read(tag_len).decode("ascii")
            depth, = struct.unpack("<I", fh.read(4))
            sizes = struct.unpack(f"<{depth}I", fh.read(4 * depth))
            net = cls(sizes, activation=tag, seed=0)
            body = np.frombuffer(fh.read(), dtype="<f8")
            net.set_param_vector(body)
        return net

    def to_json_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "parameters": self.param_vector().tolist(),
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)

    @classmethod
    def from_json_dict(cls, payload):
        net = cls(payload["layer_sizes"], activation=payload["activation"], seed=0)
        net.set_param_vector(np.asarray(payload["parameters"], dtype=float))
        return net


# ----------------------------------------------------------------------
# boundary level shift
# ----------------------------------------------------------------------
@dataclass
class BarrierMargins:
    """Per-pattern estimation radii and their barrier level shifts.

    bbar[i] approximates sup{b(x) : |x - x0| <= gamma_i, b(x0) = 0}; the
    shifted barrier is bhat_i(x) = b(x) - bbar[i].  Values are clamped
    non-negative and forced monotone in gamma, matching what the exact
    supremum satisfies.
    """

    gammas: list
    bbars: list

    def __post_init__(self):
        if any(g < 0 for g in self.gammas):
            raise ConfigError("gamma radii must be non-negative")
        order = np.argsort(self.gammas)
        running = 0.0
        fixed = list(self.bbars)
        for idx in order:
            running = max(running, max(0.0, fixed[idx]))
            fixed[idx] = running
        self.bbars = fixed

    @classmethod
    def from_net(cls, net, gammas, domain, resolution=16, max_boundary_points=256):
        bbars = [estimate_bbar(net, g, domain, resolution=resolution,
                               max_boundary_points=max_boundary_points)
                 for g in gammas]
        return cls(gammas=list(gammas), bbars=bbars)

    def bhat(self, value, i):
        return value - self.bbars[i]

    @property
    def max_bbar(self):
        return max(self.bbars)


def _grid_axes(domain, resolution):
    box = np.asarray(domain, dtype=float)
    return [np.linspace(lo, hi, resolution) for lo, hi in box]


def _eval_chunked(net, pts, chunk=65536):
    out = np.empty(pts.shape[0])
    for start in range(0, pts.shape[0], chunk):
        out[start:start + chunk] = net.value_many(pts[start:start + chunk])
    return out


def find_zero_points(net, domain, resolution, tol=1e-8, max_points=256):
    """Zero-level points of b inside the box.

    Scans a regular grid for sign changes along every axis and bisects each
    crossing edge down to |b| <= tol.  Returns an (M, n) array, subsampled
    to at most ``max_points`` by even stride.
    """
    if resolution < 8:
        raise ConfigError("resolution must be at least 8 per axis")
    axes = _grid_axes(domain, resolution)
    n = len(axes)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    vals = _eval_chunked(net, pts).reshape([resolution] * n)

    lo_list, hi_list = [], []
    grid_pts = pts.reshape([resolution] * n + [n])
    for axis in range(n):
        va = np.moveaxis(vals, axis, 0)
        pa = np.moveaxis(grid_pts, axis, 0)
        sign_change = va[:-1] * va[1:] < 0.0
        idx = np.nonzero(sign_change)
        if idx[0].size:
            lo_list.append(pa[:-1][idx])
            hi_list.append(pa[1:][idx])
    exact = pts[np.abs(vals.ravel()) <= tol]
    if not lo_list and exact.size == 0:
        return np.empty((0, n))
    zeros = [exact] if exact.size else []
    if lo_list:
        lo = np.vstack(lo_list)
        hi = np.vstack(hi_list)
        flo = _eval_chunked(net, lo)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            fmid = _eval_chunked(net, mid)
            done = np.abs(fmid) <= tol
            if np.all(done):
                break
            same_side = flo * fmid > 0.0
            lo = np.where(same_side[:, None], mid, lo)
            flo = np.where(same_side, fmid, flo)
            hi = np.where(same_side[:, None], hi, mid)
        zeros.append(0.5 * (lo + hi))
    points = np.vstack(zeros)
    if points.shape[0] > max_points:
        stride = int(np.ceil(points.shape[0] / max_points))
        points = points[::stride]
    return points


def estimate_bbar(net, gamma, domain, resolution=16, tol=1e-8,
                  max_boundary_points=256, n_directions=64, n_radii=8,
                  direction_seed=1729, with_flag=False):
    """Estimate sup{b(x) : |x - x0|_2 <= gamma over zero points x0}.

    Zero points come from a sign-change grid scan plus bisection.  Around
    each, b is maximised by sampling random directions and radii inside the
    gamma-ball; a first-order bound gamma * |db/dx(x0)| acts as a floor.
    Returns 0 (and flag False) when the level set misses the box entirely.
    """
    gamma = float(gamma)
    if gamma < 0:
        raise ConfigError("gamma must be non-negative")
    points = find_zero_points(net, domain, resolution, tol=tol,
                              max_points=max_boundary_points)
    if points.shape[0] == 0:
        return (0.0, False) if with_flag else 0.0
    if gamma == 0.0:
        return (0.0, True) if with_flag else 0.0

    n = points.shape[1]
    gen = rngmod.stream(direction_seed, 0)
    dirs = gen.standard_normal((n_directions, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = gamma * (np.arange(1, n_radii + 1) / n_radii)

    # points x directions x radii probe cloud
    cloud = (points[:, None, None, :]
             + radii[None, None, :, None] * dirs[None, :, None, :])
    sampled = _eval_chunked(net, cloud.reshape(-1, n)).max()

    grads = net.gradient_many(points)
    floor = gamma * np.linalg.norm(grads, axis=1).max()
    est = max(0.0, float(sampled), float(floor))
    return (est, True) if with_flag else est
