"""Policy optimization: reward-to-go, linear baseline, variance-normalized joint
gradient step with Adam, TRPO on the reactive policy, and the alternating
update that combines the two.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gradcore
from .errors import InvalidConfigurationError
from .policy import ActionDistribution, POLICY_KEYS, kl_divergence, log_prob, mlp_backward, mlp_forward, mlp_jvp
from .psr import PSR_KEYS

log = logging.getLogger(__name__)

CLIP_NORM = 10.0


def reward_to_go(rewards, gamma):
    """R_t = sum_{j >= t} gamma^(j - t) r_j."""
    r = np.asarray(rewards, dtype=float)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class BaselineModel:
    w: np.ndarray  # (dim + 1,), last entry is the bias

    def predict(self, states):
        X = np.atleast_2d(np.asarray(states, dtype=float))
        return X @ self.w[:-1] + self.w[-1]


def fit_baseline(states, returns, ridge=1e-6):
    """Ridge least-squares fit of returns on [state, 1]."""
    X = np.atleast_2d(np.asarray(states, dtype=float))
    y = np.asarray(returns, dtype=float).reshape(-1)
    Xb = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    G = Xb.T @ Xb + ridge * np.eye(Xb.shape[1])
    return BaselineModel(np.linalg.solve(G, Xb.T @ y))


@dataclass
class OptimizerState:
    eta: float = 1e-2
    eta_psr: float = 1e-4
    gamma: float = 0.99
    beta: float = 0.1
    a2: float = 0.1
    epsilon: float = 0.01
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    v1: float = 0.0
    v2: float = 0.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    adam_t: dict = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise InvalidConfigurationError("beta must lie in (0, 1]")
        if not 0 <= self.gamma <= 1:
            raise InvalidConfigurationError("gamma must lie in [0, 1]")
        if not self.epsilon > 0:
            raise InvalidConfigurationError("TRPO epsilon must be positive")
        if self.eta < 0 or self.eta_psr < 0:
            raise InvalidConfigurationError("step sizes must be >= 0")


def _sq_norm(g):
    return float(sum(np.sum(x * x) for x in g.values()))


def normalize_gradients(state, g1, g2=None):
    """Exponential-average gradient variance normalization.

    Updates state.v1 / state.v2 in place and returns (alpha1 g1, a2 alpha2 g2).
    A zero accumulator leaves that gradient unscaled.
    """
    state.v1 = (1 - state.beta) * state.v1 + state.beta * _sq_norm(g1)
    s1 = g1.scaled(state.v1 ** -0.5) if state.v1 > 0 else g1
    if g2 is None:
        return s1, None
    state.v2 = (1 - state.beta) * state.v2 + state.beta * _sq_norm(g2)
    s2 = g2.scaled(state.v2 ** -0.5) if state.v2 > 0 else g2
    return s1, s2.scaled(state.a2)


def clip_global_norm(grads, max_norm=CLIP_NORM):
    norm = grads.norm()
    if norm > max_norm:
        return grads.scaled(max_norm / norm), norm
    return grads, norm


def clip_blocks(grads, max_norm=CLIP_NORM):
    """Global-norm clip applied separately to the policy and the PSR parameters."""
    out = gradcore.ParameterGradients()
    for keys in (POLICY_KEYS, PSR_KEYS):
        out.update(clip_global_norm(grads.subset(keys), max_norm)[0])
    return out


def adam_step(params, grads, state, eta=None):
    """One Adam descent step on the named arrays in ``grads``; returns a new dict."""
    eta = state.eta if eta is None else eta
    out = dict(params)
    for k, g in grads.items():
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        t = state.adam_t.get(k, 0) + 1
        m = state.adam_b1 * m + (1 - state.adam_b1) * g
        v = state.adam_b2 * v + (1 - state.adam_b2) * g * g
        m_hat = m / (1 - state.adam_b1 ** t)
        v_hat = v / (1 - state.adam_b2 ** t)
        out[k] = params[k] - eta * m_hat / (np.sqrt(v_hat) + state.adam_eps)
        state.m[k], state.v[k], state.adam_t[k] = m, v, t
    return out


def conjugate_gradient(hvp, g, iters=10, tol=1e-10):
    """Approximately solve H v = g for SPD H given only products H x."""
    g = np.asarray(g, dtype=float)
    x = np.zeros_like(g)
    r = g.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iters):
        if rr <= tol:
            break
        Hp = hvp(p)
        alpha = rr / (p @ Hp)
        x += alpha * p
        r -= alpha * Hp
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


class _Flat:
    """Flatten / unflatten a dict of arrays in a fixed key order."""

    def __init__(self, template, keys):
        self.keys = [k for k in keys if k in template]
        self.shapes = [np.shape(template[k]) for k in self.keys]
        self.sizes = [int(np.prod(s)) for s in self.shapes]

    def flat(self, d):
        return np.concatenate([np.asarray(d[k], dtype=float).reshape(-1) for k in self.keys])

    def unflat(self, x):
        out, i = {}, 0
        for k, shape, size in zip(self.keys, self.shapes, self.sizes):
            out[k] = x[i:i + size].reshape(shape)
            i += size
        return out


@dataclass
class TRPOResult:
    policy: object
    accepted: bool
    kl: float
    surrogate_gain: float
    reason: str = ""
    grad_norm: float = 0.0


def trpo_step(policy, X, actions, advantages, epsilon=0.01, damping=0.1, cg_iters=10,
              backtrack=0.5, max_backtracks=10):
    """KL-constrained natural-gradient step on the reactive policy with fixed inputs X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    actions = np.asarray(actions, dtype=float).reshape(len(X), -1)
    adv = np.asarray(advantages, dtype=float).reshape(-1)
    N = len(X)
    mu_old, cache = mlp_forward(policy, X)
    old = ActionDistribution(mu_old, policy.r.copy())
    logp_old = log_prob(old, actions)

    def surrogate(p):
        mu, _ = mlp_forward(p, X)
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.mean(np.exp(log_prob(ActionDistribution(mu, p.r), actions) - logp_old) * adv))

    flat = _Flat(policy.arrays(), POLICY_KEYS)
    theta = flat.flat(policy.arrays())
    # gradient of the surrogate at theta_old equals mean(grad log pi * A)
    var = np.exp(2 * policy.r)
    diff = actions - mu_old
    g_net, _ = mlp_backward(policy, cache, diff / var * adv[:, None] / N)
    g_net["r"] = np.mean((diff ** 2 / var - 1.0) * adv[:, None], axis=0)
    g = flat.flat(g_net)
    gnorm = float(np.linalg.norm(g))
    if not np.any(g):
        return TRPOResult(policy, False, 0.0, 0.0, "zero gradient", gnorm)

    def hvp(v):
        # Hessian of mean KL(old || new) at theta_old: J_mu^T diag(1/sigma^2) J_mu for the mean network, 2 I for r
        vd = flat.unflat(v)
        dmu = mlp_jvp(policy, cache, vd)
        h, _ = mlp_backward(policy, cache, dmu / var / N)
        h["r"] = 2.0 * vd["r"]
        return flat.flat(h) + damping * v

    s = conjugate_gradient(hvp, g, iters=cg_iters)
    shs = float(s @ hvp(s))
    if not shs > 0:
        return TRPOResult(policy, False, 0.0, 0.0, "non-positive curvature", gnorm)
    full = s * np.sqrt(2 * epsilon / shs)
    base = surrogate(policy)
    for k in range(max_backtracks):
        cand = policy.replace(**flat.unflat(theta + (backtrack ** k) * full))
        mu_new, _ = mlp_forward(cand, X)
        kl = float(np.mean(kl_divergence(old, ActionDistribution(mu_new, cand.r))))
        gain = surrogate(cand) - base
        if np.isfinite(gain) and gain > 0 and kl <= epsilon:
            return TRPOResult(cand, True, kl, gain, "", gnorm)
    log.info("TRPO line search failed; keeping the policy")
    return TRPOResult(policy, False, 0.0, 0.0, "line search failed", gnorm)


@dataclass
class Batch:
    """Trajectories plus the fixed observation-window inputs for the policy."""

    trajectories: list
    aug: list = None

    @property
    def M(self):
        return len(self.trajectories)

    @property
    def n_steps(self):
        return sum(len(t) for t in self.trajectories)


@dataclass
class UpdateInfo:
    pred_loss: float = 0.0
    mean_kl: float = 0.0
    grad_norm_l1: float = 0.0
    grad_norm_l2: float = 0.0
    cap_events: int = 0
    trpo_accepted: bool = False


def _advantages(tape, batch, gamma):
    """Returns, baseline fit on the policy inputs, and per-trajectory advantages."""
    returns = [reward_to_go(t.rewards, gamma) for t in batch.trajectories]
    X = tape.stacked(tape.policy_inputs)
    R = tape.stacked(lambda t, n: np.array([returns[i][t] for i in tape.order[:n]]))
    baseline = fit_baseline(X, R)
    adv = tape.per_trajectory(R - baseline.predict(X))
    return X, adv


def _policy_kl(policy_old, policy_new, X):
    mu_o, _ = mlp_forward(policy_old, X)
    mu_n, _ = mlp_forward(policy_new, X)
    return float(np.mean(kl_divergence(ActionDistribution(mu_o, policy_old.r), ActionDistribution(mu_n, policy_new.r))))


def _joint_gradient(psr, policy, batch, state, tape, adv):
    """Block-clipped, normalized gradient of alpha1 l1 + alpha2 l2 and the raw norms."""
    M, N = batch.M, batch.n_steps
    _, g1, _ = gradcore.backward(psr, policy, batch.trajectories, logp_weights=[-a / M for a in adv], tape=tape)
    g2 = None
    pred_loss = 0.0
    if psr is not None:
        pred_loss, g2, _ = gradcore.backward(psr, policy, batch.trajectories,
                                             pred_weights=[np.full(len(t), 1.0 / N) for t in batch.trajectories],
                                             tape=tape)
    n1, n2 = g1.norm(), (g2.norm() if g2 is not None else 0.0)
    # Filter gradients are heavy-tailed (near-singular KBR systems); clipping each block before
    # normalizing keeps a spike from shrinking the policy step, now and through the running variance.
    s1, s2 = normalize_gradients(state, clip_blocks(g1), None if g2 is None else clip_blocks(g2))
    return (s1 if s2 is None else s1 + s2), pred_loss, n1, n2


def _adam_split(params, g, state):
    """Adam with eta on the reactive policy and eta_psr on the filter parameters."""
    out = adam_step(params, g.subset(POLICY_KEYS), state)
    out.update({k: v for k, v in adam_step(params, g.subset(PSR_KEYS), state, eta=state.eta_psr).items()
                if k in PSR_KEYS})
    return out


def vrpg_update(psr, policy, batch, state):
    """Joint step: l1 (policy gradient) and l2 (prediction) gradients, normalized, one Adam step."""
    tape = gradcore.forward(psr, policy, batch.trajectories, aug=batch.aug)
    X, adv = _advantages(tape, batch, state.gamma)
    g, pred_loss, n1, n2 = _joint_gradient(psr, policy, batch, state, tape, adv)
    new = _adam_split(gradcore.param_arrays(psr, policy), g, state)
    psr_new, policy_new = gradcore.with_arrays(psr, policy, new)
    state.iteration += 1
    info = UpdateInfo(pred_loss, _policy_kl(policy, policy_new, X), n1, n2, tape.cap_events)
    return psr_new, policy_new, info


def alternating_update(psr, policy, batch, state):
    """(1) Adam step on the PSR block with the joint loss; (2) TRPO on the policy over re-filtered states."""
    tape = gradcore.forward(psr, policy, batch.trajectories, aug=batch.aug)
    _, adv = _advantages(tape, batch, state.gamma)
    info = UpdateInfo(cap_events=tape.cap_events)
    if psr is not None:
        g, info.pred_loss, info.grad_norm_l1, info.grad_norm_l2 = _joint_gradient(psr, policy, batch, state, tape, adv)
        new = adam_step(psr.arrays(), g.subset(PSR_KEYS), state, eta=state.eta_psr)
        psr, _ = gradcore.with_arrays(psr, None, new)
        tape = gradcore.forward(psr, policy, batch.trajectories, aug=batch.aug)
    X, adv = _advantages(tape, batch, state.gamma)
    A = tape.stacked(lambda t, n: tape.actions[:n, t])
    res = trpo_step(policy, X, A, gradcore.stack_by_step(tape, adv), epsilon=state.epsilon)
    if psr is None:
        info.grad_norm_l1 = res.grad_norm
    info.mean_kl = res.kl
    info.trpo_accepted = res.accepted
    state.iteration += 1
    return psr, res.policy, info

