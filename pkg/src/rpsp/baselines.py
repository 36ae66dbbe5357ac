"""Finite-memory agents and the observation-augmented RPSP variant.

Both kinds of agent plug into the same collection and training code: an
agent only decides what its policy sees (a filtered predictive state, a
window of past observations, or both).
"""

import numpy as np

from . import psr as psr_mod
from .errors import InvalidConfigurationError
from .policy import policy_forward

AGENTS = ("fm1", "fm2", "fm5", "rpsp-vrpg", "rpsp-alt", "rpsp-vrpg+obs", "rpsp-alt+obs")
DEFAULT_OBS_WINDOW = 2


def fm_state_update(window, o):
    """Drop the oldest observation and append ``o`` (works on single windows or batches)."""
    window = np.asarray(window, dtype=float)
    o = np.asarray(o, dtype=float)
    width = o.shape[-1]
    if window.shape[-1] == 0:
        return window.copy()
    return np.concatenate([window[..., width:], o], axis=-1)


def augment_state(q, window):
    """[q ; o_{t-w+1} .. o_t]."""
    q = np.asarray(q, dtype=float)
    window = np.asarray(window, dtype=float)
    if q.ndim == window.ndim + 1:  # operator form (..., d_fo, d_fa)
        q = q.reshape(q.shape[:-2] + (-1,))
    return np.concatenate([q, window], axis=-1)


def observation_windows(traj, w):
    """(T, w * obs_dim) windows seen by the policy at each step, zero-padded before the episode."""
    T, d = traj.observations.shape
    out = np.zeros((T, w * d))
    window = np.zeros(w * d)
    for t in range(T):
        out[t] = window
        window = fm_state_update(window, traj.observations[t])
    return out


def parse_agent(name):
    """Agent name -> dict(kind, update, window)."""
    if name not in AGENTS:
        raise InvalidConfigurationError(f"unknown agent {name!r}; choose from {', '.join(AGENTS)}")
    if name.startswith("fm"):
        return dict(kind="fm", update="alt", window=int(name[2:]))
    update = "vrpg" if name.startswith("rpsp-vrpg") else "alt"
    return dict(kind="rpsp", update=update, window=DEFAULT_OBS_WINDOW if name.endswith("+obs") else 0)


class RPSPAgent:
    """Filters predictive states online; the policy sees q_t (optionally with an observation window)."""

    def __init__(self, psr, policy, window=0, obs_dim=None):
        self.psr = psr
        self.policy = policy
        self.window = window
        self.obs_dim = obs_dim if obs_dim is not None else psr.pipeline.obs_dim

    def start(self, n):
        return dict(Q=np.repeat(self.psr.q0[None], n, axis=0), W=np.zeros((n, self.window * self.obs_dim)))

    def inputs(self, state):
        n = len(state["Q"])
        return np.concatenate([state["Q"].reshape(n, -1), state["W"]], axis=1)

    def tracker_vector(self, state):
        return self.inputs(state)

    def distribution(self, x):
        return policy_forward(self.policy, x)

    def advance(self, state, rows, a, o):
        Q = state["Q"].copy()
        W = state["W"].copy()
        pl = self.psr.pipeline
        Qn, _, capped, _ = psr_mod.filter_features(self.psr, Q[rows], pl.phi_act(a), pl.phi_obs(o), exact=True)
        Q[rows] = Qn
        W[rows] = fm_state_update(W[rows], o)
        return dict(Q=Q, W=W), int(np.sum(capped))

    def aug(self, trajectories):
        if self.window == 0:
            return None
        return [observation_windows(t, self.window) for t in trajectories]


class FMAgent:
    """Finite-memory agent: the policy sees the last ``window`` observations."""

    psr = None

    def __init__(self, policy, window, obs_dim):
        if window < 1:
            raise InvalidConfigurationError("finite-memory window must be >= 1")
        self.policy = policy
        self.window = window
        self.obs_dim = obs_dim

    def start(self, n):
        return dict(W=np.zeros((n, self.window * self.obs_dim)))

    def inputs(self, state):
        return state["W"]

    def tracker_vector(self, state):
        return state["W"]

    def distribution(self, x):
        return policy_forward(self.policy, x)

    def advance(self, state, rows, a, o):
        W = state["W"].copy()
        W[rows] = fm_state_update(W[rows], o)
        return dict(W=W), 0

    def aug(self, trajectories):
        return [observation_windows(t, self.window) for t in trajectories]
