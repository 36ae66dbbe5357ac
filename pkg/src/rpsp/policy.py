"""Gaussian reactive policy: a one-hidden-layer ReLU network for the mean and a
state-independent log standard deviation.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

HIDDEN = 16
LOG_STD_INIT = np.log(0.5)
POLICY_KEYS = ("W1", "b1", "W2", "b2", "r")
INPUT_KEYS = ("in_shift", "in_scale")
HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


@dataclass
class PolicyParams:
    W1: np.ndarray  # (hidden, in_dim)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (act_dim, hidden)
    b2: np.ndarray  # (act_dim,)
    r: np.ndarray  # (act_dim,) log standard deviation
    # Fixed input standardization x -> (x - in_shift) * in_scale; never trained.
    in_shift: np.ndarray = None
    in_scale: np.ndarray = None

    @property
    def in_dim(self):
        return self.W1.shape[1]

    @property
    def act_dim(self):
        return self.W2.shape[0]

    def arrays(self):
        return {k: getattr(self, k) for k in POLICY_KEYS}

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def standardized(self, shift, scale):
        return self.replace(in_shift=np.asarray(shift, dtype=float), in_scale=np.asarray(scale, dtype=float))


def standardizer(X, rel_floor=0.1):
    """(shift, scale) that give the columns of ``X`` zero mean and unit spread.

    Near-constant columns get their spread floored at ``rel_floor`` times the
    largest one so that small drifts are not blown up.
    """
    X = np.asarray(X, dtype=float)
    std = X.std(axis=0)
    std = np.maximum(std, max(rel_floor * std.max(), 1e-12))
    return X.mean(axis=0), 1.0 / std


@dataclass
class ActionDistribution:
    mean: np.ndarray  # (n, act_dim)
    log_std: np.ndarray  # (act_dim,)

    @property
    def std(self):
        return np.exp(self.log_std)


def init_policy(in_dim, act_dim, seed=0, hidden=HIDDEN, log_std=LOG_STD_INIT):
    """Fan-in scaled uniform weights, zero biases, r = log_std."""
    rng = np.random.default_rng(seed)
    b_in, b_hid = 1.0 / np.sqrt(in_dim), 1.0 / np.sqrt(hidden)
    return PolicyParams(
        W1=rng.uniform(-b_in, b_in, (hidden, in_dim)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-b_hid, b_hid, (act_dim, hidden)),
        b2=np.zeros(act_dim),
        r=np.full(act_dim, float(log_std)),
    )


def mlp_forward(params, x):
    """Mean network; returns (mu, cache)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.in_dim:
        raise DimensionError(f"policy input has dim {x.shape[1]}, expected {params.in_dim}")
    if params.in_scale is not None:
        x = (x - params.in_shift) * params.in_scale
    z = x @ params.W1.T + params.b1
    h = np.maximum(z, 0.0)
    return h @ params.W2.T + params.b2, (x, z, h)


def mlp_backward(params, cache, g_mu):
    """Vector-Jacobian product; returns (grads for W1, b1, W2, b2, g_x)."""
    x, z, h = cache
    gW2 = g_mu.T @ h
    gb2 = g_mu.sum(axis=0)
    gz = (g_mu @ params.W2) * (z > 0)
    g_x = gz @ params.W1
    if params.in_scale is not None:
        g_x = g_x * params.in_scale
    return {"W1": gz.T @ x, "b1": gz.sum(axis=0), "W2": gW2, "b2": gb2}, g_x


def mlp_jvp(params, cache, v):
    """Directional derivative of mu along parameter direction ``v`` (dict of W1, b1, W2, b2)."""
    x, z, h = cache
    dz = x @ v["W1"].T + v["b1"]
    dh = dz * (z > 0)
    return dh @ params.W2.T + h @ v["W2"].T + v["b2"]


def policy_forward(params, x):
    mu, _ = mlp_forward(params, x)
    return ActionDistribution(mu, params.r.copy())


def sample_action(dist, rng):
    """a = mu + sigma * z with z standard normal drawn from ``rng``."""
    return dist.mean + dist.std * rng.standard_normal(dist.mean.shape)


def log_prob(dist, a):
    """Diagonal-Gaussian log density, one value per row."""
    a = np.asarray(a, dtype=float).reshape(dist.mean.shape)
    z = (a - dist.mean) / dist.std
    return np.sum(-0.5 * z ** 2 - dist.log_std - HALF_LOG_2PI, axis=-1)


def log_prob_grads(dist, a):
    """Per-row derivatives of log_prob with respect to mu and r."""
    a = np.asarray(a, dtype=float).reshape(dist.mean.shape)
    var = dist.std ** 2
    diff = a - dist.mean
    return diff / var, diff ** 2 / var - 1.0


def kl_divergence(d1, d2):
    """KL(d1 || d2) per row for diagonal Gaussians."""
    var1, var2 = np.exp(2 * d1.log_std), np.exp(2 * d2.log_std)
    return np.sum(d2.log_std - d1.log_std + (var1 + (d1.mean - d2.mean) ** 2) / (2 * var2) - 0.5, axis=-1)


def policy_grads(params, x, a, weights):
    """Gradient of sum_i weights_i log pi(a_i | x_i); returns (grads dict, g_x)."""
    mu, cache = mlp_forward(params, x)
    dist = ActionDistribution(mu, params.r)
    g_mu, g_r = log_prob_grads(dist, a)
    w = np.asarray(weights, dtype=float)[:, None]
    grads, g_x = mlp_backward(params, cache, g_mu * w)
    grads["r"] = np.sum(g_r * w, axis=0)
    return grads, g_x
