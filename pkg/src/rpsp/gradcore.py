"""Reverse-mode gradients through the unrolled filter, the prediction head and
the reactive policy (backpropagation through time), plus a finite-difference
checker.

The differentiated objective is

    J = sum_{i,t} wpi[i][t] * log pi(a_t | x_t)  +  sum_{i,t} wpred[i][t] * |W_pred (q_t (x) phi_a(a_t)) - o_t|^2

where x_t is the policy input built from q_t (optionally followed by a fixed
observation window). Either term can be switched off by passing ``None``.
Trajectories are processed together, sorted by length, so the rows still
running at step t always form a prefix of the batch.
"""

from dataclasses import dataclass, field

import numpy as np

from . import psr as psr_mod
from .errors import GradientOverflowError
from .policy import POLICY_KEYS, log_prob, mlp_forward, policy_grads, ActionDistribution
from .psr import PSR_KEYS


class ParameterGradients(dict):
    """Name -> gradient array, shape-matched to the parameter of the same name."""

    def norm(self):
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.values())))

    def scaled(self, alpha):
        return ParameterGradients({k: alpha * g for k, g in self.items()})

    def __add__(self, other):
        keys = list(self) + [k for k in other if k not in self]
        return ParameterGradients({k: self.get(k, 0) + other.get(k, 0) for k in keys})

    def subset(self, keys):
        return ParameterGradients({k: self[k] for k in keys if k in self})


def param_arrays(psr, policy):
    """Flat name -> array view of all trainable parameters."""
    out = {}
    if psr is not None:
        out.update(psr.arrays())
    if policy is not None:
        out.update(policy.arrays())
    return out


def with_arrays(psr, policy, arrays):
    """Copies of (psr, policy) with the named arrays replaced."""
    if psr is not None:
        psr = psr.replace(**{k: arrays[k] for k in PSR_KEYS if k in arrays})
    if policy is not None:
        policy = policy.replace(**{k: arrays[k] for k in POLICY_KEYS if k in arrays})
    return psr, policy


def _padded(arrays, lengths, width):
    out = np.zeros((len(arrays), int(max(lengths, default=0)), width))
    for j, a in enumerate(arrays):
        out[j, :len(a)] = a
    return out


@dataclass
class Tape:
    order: np.ndarray  # batch row j holds trajectory order[j]
    lengths: np.ndarray  # sorted, descending
    counts: list  # active rows at each step
    actions: np.ndarray  # (M, Tmax, act_dim) padded
    observations: np.ndarray
    phi_a: np.ndarray = None
    aug: np.ndarray = None
    states: list = field(default_factory=list)  # states[t]: (n_{t-1}, d_fo, d_fa); states[0] has M rows
    caches: list = field(default_factory=list)
    cap_events: int = 0

    def step_rows(self):
        """(t, n_t) for every step, in time order."""
        return [(t, n) for t, n in enumerate(self.counts)]

    def policy_inputs(self, t, n):
        parts = []
        if self.states:
            parts.append(self.states[t][:n].reshape(n, -1))
        if self.aug is not None:
            parts.append(self.aug[:n, t])
        return np.concatenate(parts, axis=1)

    def stacked(self, fn):
        return np.concatenate([fn(t, n) for t, n in self.step_rows()]) if self.counts else None

    def per_trajectory(self, stacked):
        """Split rows stacked by step back into per-trajectory arrays (original order)."""
        out = [None] * len(self.order)
        offsets = np.concatenate([[0], np.cumsum(self.counts)]).astype(int)
        for j, i in enumerate(self.order):
            rows = offsets[:self.lengths[j]] + j
            out[i] = stacked[rows]
        return out

    def trajectory_states(self):
        """Per-trajectory (T + 1, d_fo, d_fa) filtered states in original order."""
        out = [None] * len(self.order)
        for j, i in enumerate(self.order):
            out[i] = np.stack([self.states[t][j] for t in range(self.lengths[j] + 1)])
        return out


def forward(psr, policy, trajectories, aug=None, exact=False):
    """Run the filter over the batch and record everything the backward pass needs.

    ``aug`` is an optional list of per-trajectory (T, w) arrays appended to the
    policy input. With ``psr=None`` the policy sees ``aug`` only.
    """
    trajs = list(trajectories)
    order = np.array(sorted(range(len(trajs)), key=lambda i: -len(trajs[i])), dtype=int)
    lengths = np.array([len(trajs[i]) for i in order], dtype=int)
    T_max = int(lengths[0]) if len(lengths) else 0
    counts = [int(np.sum(lengths > t)) for t in range(T_max)]
    act_dim = trajs[0].actions.shape[1] if trajs else 1
    obs_dim = trajs[0].observations.shape[1] if trajs else 1
    tape = Tape(order, lengths, counts,
                _padded([trajs[i].actions for i in order], lengths, act_dim),
                _padded([trajs[i].observations for i in order], lengths, obs_dim))
    if aug is not None:
        width = aug[0].shape[1] if len(aug) else 0
        tape.aug = _padded([aug[i] for i in order], lengths, width)
    if psr is None:
        return tape
    pl = psr.pipeline
    tape.phi_a = _padded([pl.phi_act(trajs[i].actions) for i in order], lengths, psr.d_a)
    phi_o = _padded([pl.phi_obs(trajs[i].observations) for i in order], lengths, psr.d_o)
    Q = np.repeat(psr.q0[None], len(order), axis=0)
    tape.states.append(Q)
    for t, n in enumerate(counts):
        Q, scale, capped, cache = psr_mod.filter_features(psr, Q[:n], tape.phi_a[:n, t], phi_o[:n, t], t=t, exact=exact)
        tape.states.append(Q)
        tape.caches.append(cache + (scale,))
        tape.cap_events += int(np.sum(capped))
    return tape


def _prediction_terms(psr, tape, t, n):
    q = tape.states[t][:n].reshape(n, -1)
    z = psr_mod.prediction_inputs(psr, q, tape.phi_a[:n, t])
    return z, z @ psr.W_pred.T - tape.observations[:n, t]


def stack_by_step(tape, weights):
    """Per-trajectory weight arrays -> one array stacked by step."""
    padded = _padded([np.asarray(weights[i], dtype=float).reshape(-1, 1) for i in tape.order], tape.lengths, 1)[..., 0]
    return tape.stacked(lambda t, n: padded[:n, t])


def evaluate(psr, policy, tape, logp_weights=None, pred_weights=None):
    """Objective value J on a recorded tape."""
    value = 0.0
    if logp_weights is not None and tape.counts:
        X = tape.stacked(tape.policy_inputs)
        A = tape.stacked(lambda t, n: tape.actions[:n, t])
        mu, _ = mlp_forward(policy, X)
        value += float(np.sum(stack_by_step(tape, logp_weights) * log_prob(ActionDistribution(mu, policy.r), A)))
    if pred_weights is not None and tape.counts:
        w = stack_by_step(tape, pred_weights)
        resid = tape.stacked(lambda t, n: _prediction_terms(psr, tape, t, n)[1])
        value += float(np.sum(w * np.sum(resid ** 2, axis=1)))
    return value


def objective(psr, policy, trajectories, logp_weights=None, pred_weights=None, aug=None, exact=False):
    tape = forward(psr, policy, trajectories, aug=aug, exact=exact)
    return evaluate(psr, policy, tape, logp_weights, pred_weights)


def backward(psr, policy, trajectories, logp_weights=None, pred_weights=None, aug=None, exact=False, tape=None):
    """Exact gradient of J; returns (J, ParameterGradients, tape)."""
    if tape is None:
        tape = forward(psr, policy, trajectories, aug=aug, exact=exact)
    value = evaluate(psr, policy, tape, logp_weights, pred_weights)
    grads = ParameterGradients({k: np.zeros_like(v) for k, v in param_arrays(psr, policy).items()})
    if not tape.counts:
        return value, grads, tape
    offsets = np.concatenate([[0], np.cumsum(tape.counts)]).astype(int)
    g_states = [np.zeros_like(s) for s in tape.states]

    if logp_weights is not None:
        X = tape.stacked(tape.policy_inputs)
        A = tape.stacked(lambda t, n: tape.actions[:n, t])
        g_pol, g_x = policy_grads(policy, X, A, stack_by_step(tape, logp_weights))
        for k, g in g_pol.items():
            grads[k] = grads[k] + g
        if psr is not None:
            for t, n in tape.step_rows():
                g_states[t][:n] += g_x[offsets[t]:offsets[t + 1], :psr.d_q].reshape(n, psr.d_fo, psr.d_fa)

    if pred_weights is not None:
        w = stack_by_step(tape, pred_weights)
        for t, n in tape.step_rows():
            z, resid = _prediction_terms(psr, tape, t, n)
            g_pred = 2.0 * w[offsets[t]:offsets[t + 1], None] * resid
            grads["W_pred"] += g_pred.T @ z
            gz = (g_pred @ psr.W_pred)[:, :psr.d_q * psr.d_a].reshape(n, psr.d_q, psr.d_a)
            g_states[t][:n] += np.sum(gz * tape.phi_a[:n, t][:, None, :], axis=2).reshape(n, psr.d_fo, psr.d_fa)

    if psr is not None:
        _backward_filter(psr, tape, g_states, grads)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientOverflowError(f"non-finite gradient for {k}")
    return value, grads, tape


def _backward_filter(psr, tape, g_states, grads):
    """Propagate state gradients back through the recursion into q0 and W_ext."""
    for t in reversed(range(len(tape.counts))):
        n = tape.counts[t]
        Minv, m, T, scale = tape.caches[t]
        G = g_states[t + 1][:n] * scale[:, None, None]  # cap scale held constant
        if not np.any(G):
            continue
        fa = tape.phi_a[:n, t]
        gT = G[:, :, None, :] * m[:, None, :, None]  # (n, d_fo, d_o, d_fa)
        gm = np.einsum("nfg,nfig->ni", G, T)
        gM = -(Minv.transpose(0, 2, 1) @ gm[:, :, None]) @ m[:, None, :]  # inverse rule
        gp_o = (gM[..., None] * fa[:, None, None, :]).reshape(n, -1)
        gp_xi = (gT[..., None] * fa[:, None, None, None, :]).reshape(n, -1)
        q = tape.states[t][:n].reshape(n, -1)
        grads["W_ext_xi"] += gp_xi.T @ q
        grads["W_ext_o"] += gp_o.T @ q
        g_states[t][:n] += (gp_xi @ psr.W_ext_xi + gp_o @ psr.W_ext_o).reshape(n, psr.d_fo, psr.d_fa)
        if not np.all(np.isfinite(g_states[t])):
            raise GradientOverflowError("non-finite state gradient", t)
    grads["q0"] += g_states[0].sum(axis=0)


def prediction_loss(psr, trajectories):
    """Mean over steps of |predicted o_t - o_t|^2 along the filtered states."""
    trajs = list(trajectories)
    n = sum(len(tr) for tr in trajs)
    if n == 0:
        return 0.0
    weights = [np.full(len(tr), 1.0 / n) for tr in trajs]
    return objective(psr, None, trajs, pred_weights=weights)


@dataclass
class FDResult:
    max_rel_err: float
    key: str
    index: tuple
    n_checked: int


def finite_difference_check(fun, params, grads, eps=1e-5, n_coords=None, seed=0, floor=1e-8):
    """Worst relative error between ``grads`` and central differences of ``fun``.

    ``fun`` maps a name -> array dict to a scalar. All coordinates are checked
    unless ``n_coords`` asks for a random subsample.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    coords = [(k, idx) for k in params for idx in np.ndindex(np.shape(params[k]))]
    if n_coords is not None and n_coords < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), n_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]
    work = {k: np.array(v, dtype=float, copy=True) for k, v in params.items()}
    worst = FDResult(0.0, None, None, len(coords))
    for k, idx in coords:
        orig = work[k][idx]
        work[k][idx] = orig + eps
        up = fun(work)
        work[k][idx] = orig - eps
        down = fun(work)
        work[k][idx] = orig
        fd = (up - down) / (2 * eps)
        an = float(np.asarray(grads[k])[idx])
        err = abs(fd - an) / max(abs(fd), abs(an), floor)
        if err > worst.max_rel_err:
            worst = FDResult(err, k, idx, len(coords))
    return worst


def tiny_instance(seed=0, T=5, n_traj=2):
    """Small random system (d_fo = d_fa = 3, d_o = d_a = 2, horizon T) for gradient checks.

    Returns (psr, policy, trajectories, logp_weights).
    """
    from .features import fit_pipeline
    from .init2sr import PSRConfig, random_psr
    from .policy import init_policy
    from .trajectory import Trajectory

    rng = np.random.default_rng(seed)
    fit = [Trajectory(rng.uniform(-1, 1, (20, 1)), rng.normal(size=(20, 2)), np.zeros(20)) for _ in range(5)]
    pipeline = fit_pipeline(fit, k=1, w_h=1, d=3, d_future=3, d_immediate=2, n_sequence=50, n_immediate=50,
                            action_low=[-1.0], action_high=[1.0], seed=seed)
    psr = random_psr(pipeline, PSRConfig(lam=0.5), seed=seed, ext_scale=1.0)
    policy = init_policy(psr.d_q, 1, seed=seed + 1)
    trajs = [Trajectory(rng.uniform(-1.2, 1.2, (T, 1)), rng.normal(size=(T, 2)), rng.normal(size=T))
             for _ in range(n_traj)]
    weights = [rng.normal(size=T) for _ in range(n_traj)]
    return psr, policy, trajs, weights


CHECK_OBJECTIVES = ("prediction", "policy", "joint")


def gradient_check_suite(seeds=(0, 1, 2), eps=1e-5):
    """Finite-difference check of every parameter on the tiny instance.

    Yields (seed, objective name, FDResult) for the prediction loss, the
    policy-gradient surrogate and their sum.
    """
    for seed in seeds:
        psr, policy, trajs, w = tiny_instance(seed)
        pw = [np.full(len(t), 0.1) for t in trajs]
        for name, lw, prw in zip(CHECK_OBJECTIVES, (None, w, w), (pw, None, pw)):
            _, g, _ = backward(psr, policy, trajs, lw, prw)
            fun = lambda arr: objective(*with_arrays(psr, policy, arr), trajs, lw, prw)
            yield seed, name, finite_difference_check(fun, param_arrays(psr, policy), g, eps=eps)
