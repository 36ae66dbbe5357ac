"""Predictive-state filter: linear extension, KBR conditioning, observation prediction.

Shapes (batched helpers take a leading ``n`` axis):

    Q      predictive state, operator psi_a -> E[psi_o]         (d_fo, d_fa)
    P_xi   extended block over (psi_o', phi_o, psi_a', phi_a)   (d_fo, d_o, d_fa, d_a)
    P_o    immediate block over (phi_o, phi_o, phi_a)           (d_o, d_o, d_a)

Flattening is row-major throughout, so ``q = Q.reshape(-1)``.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FilterDegeneracyError

DEFAULT_LAMBDA = 0.3
DEFAULT_STATE_CAP = 1e6
MAX_CONDITION = 1e12

PSR_KEYS = ("q0", "W_ext_xi", "W_ext_o", "W_pred")


@dataclass
class PSRParams:
    q0: np.ndarray  # (d_fo, d_fa)
    W_ext_xi: np.ndarray  # (d_fo*d_o*d_fa*d_a, d_q)
    W_ext_o: np.ndarray  # (d_o*d_o*d_a, d_q)
    W_pred: np.ndarray  # (obs_dim, d_q*d_a), or one extra bias column
    d_o: int
    d_a: int
    lam: float = DEFAULT_LAMBDA
    cap: float = DEFAULT_STATE_CAP
    pipeline: object = None

    def __post_init__(self):
        if not self.lam > 0:
            raise DimensionError(f"KBR regularizer must be positive, got {self.lam}")
        d_fo, d_fa = self.q0.shape
        d_q = d_fo * d_fa
        expect = {
            "W_ext_xi": (d_fo * self.d_o * d_fa * self.d_a, d_q),
            "W_ext_o": (self.d_o * self.d_o * self.d_a, d_q),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.W_pred.shape[1] not in (d_q * self.d_a, d_q * self.d_a + 1):
            raise DimensionError(f"W_pred has {self.W_pred.shape[1]} columns, expected {d_q * self.d_a}")
        if self.pipeline is not None and (self.pipeline.d_o, self.pipeline.d_a) != (self.d_o, self.d_a):
            raise DimensionError("immediate feature dims disagree with the pipeline")

    @property
    def d_fo(self):
        return self.q0.shape[0]

    @property
    def d_fa(self):
        return self.q0.shape[1]

    @property
    def d_q(self):
        return self.q0.size

    @property
    def pred_bias(self):
        return self.W_pred.shape[1] == self.d_q * self.d_a + 1

    def arrays(self):
        return {k: getattr(self, k) for k in PSR_KEYS}

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class ExtendedState:
    P_xi: np.ndarray
    P_o: np.ndarray

    def flatten(self):
        lead = self.P_o.shape[:-3]
        return np.concatenate([self.P_xi.reshape(lead + (-1,)), self.P_o.reshape(lead + (-1,))], axis=-1)


def _as_batch(params, q):
    """Return (flat (n, d_q), original leading shape)."""
    q = np.asarray(q, dtype=float)
    if q.shape == (params.d_q,):
        return q[None], ()
    if q.shape[-2:] == (params.d_fo, params.d_fa):
        lead = q.shape[:-2]
        return q.reshape(-1, params.d_q), lead
    if q.ndim == 2 and q.shape[1] == params.d_q:
        return q, (q.shape[0],)
    raise DimensionError(f"state of shape {q.shape} does not match ({params.d_fo}, {params.d_fa})")


def _matvec_rows(q, W, exact):
    # Stacked 1-row products give each row a result independent of the batch size.
    if exact:
        return (q[:, None, :] @ W.T)[:, 0]
    return q @ W.T


def extend(params, q, exact=True):
    """Linear extension q -> (P_xi, P_o)."""
    flat, lead = _as_batch(params, q)
    n = len(flat)
    p_xi = _matvec_rows(flat, params.W_ext_xi, exact)
    p_o = _matvec_rows(flat, params.W_ext_o, exact)
    d_fo, d_o, d_fa, d_a = params.d_fo, params.d_o, params.d_fa, params.d_a
    P_xi = p_xi.reshape((n, d_fo, d_o, d_fa, d_a))
    P_o = p_o.reshape((n, d_o, d_o, d_a))
    return ExtendedState(P_xi.reshape(lead + P_xi.shape[1:]), P_o.reshape(lead + P_o.shape[1:]))


def _norm1(M):
    return np.abs(M).sum(axis=-2).max(axis=-1)


def kbr_condition(P_xi, P_o, phi_a, phi_o, lam, t=None):
    """Batched KBR conditioning on feature vectors.

    Returns (Q_next, cache) where cache = (Minv, m, T) is reused by the
    backward pass. All contractions are stacked per-row products so a row's
    result does not depend on what else is in the batch.
    """
    n, d_fo, d_o, d_fa, d_a = P_xi.shape
    fa = phi_a[:, :, None]
    C = (P_o.reshape(n, d_o * d_o, d_a) @ fa).reshape(n, d_o, d_o)
    M = C + lam * np.eye(d_o)
    try:
        Minv = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise FilterDegeneracyError("singular KBR system", t) from exc
    cond = _norm1(M) * _norm1(Minv)
    if not np.all(np.isfinite(cond)) or np.any(cond > MAX_CONDITION):
        raise FilterDegeneracyError(f"KBR system condition number {np.max(cond):.3g} exceeds {MAX_CONDITION:g}", t)
    m = (Minv @ phi_o[:, :, None])[:, :, 0]
    T = (P_xi.reshape(n, d_fo * d_o * d_fa, d_a) @ fa).reshape(n, d_fo, d_o, d_fa)
    Q = (T.transpose(0, 1, 3, 2) @ m[:, None, :, None])[..., 0]
    return Q, (Minv, m, T)


def condition(ext, a, o, pipeline, lam, t=None):
    """Condition an extended state on the executed action and the observation."""
    P_xi, P_o = np.asarray(ext.P_xi), np.asarray(ext.P_o)
    single = P_o.ndim == 3
    if single:
        P_xi, P_o = P_xi[None], P_o[None]
    phi_a = np.atleast_2d(pipeline.phi_act(np.asarray(a, dtype=float).reshape(len(P_o), -1)))
    phi_o = np.atleast_2d(pipeline.phi_obs(np.asarray(o, dtype=float).reshape(len(P_o), -1)))
    if phi_a.shape[1] != P_o.shape[-1] or phi_o.shape[1] != P_o.shape[-2]:
        raise DimensionError("feature dims do not match the extended state")
    Q, _ = kbr_condition(P_xi, P_o, phi_a, phi_o, lam, t)
    return Q[0] if single else Q


def apply_cap(Q, cap):
    """Rescale states whose Frobenius norm exceeds ``cap``; returns (Q, scale, capped)."""
    norms = np.sqrt(np.einsum("nfg,nfg->n", Q, Q))
    capped = norms > cap
    scale = np.where(capped, cap / np.where(capped, norms, 1.0), 1.0)
    return Q * scale[:, None, None], scale, capped


def filter_step(params, q, a, o, t=None):
    """One filter update; returns (q_next, capped)."""
    q = np.asarray(q, dtype=float)
    single = q.ndim == 2 and q.shape == (params.d_fo, params.d_fa)
    ext = extend(params, q[None] if single else q)
    Q = condition(ext, a, o, params.pipeline, params.lam, t)
    Q, _, capped = apply_cap(Q, params.cap)
    if single:
        return Q[0], bool(capped[0])
    return Q, capped


def filter_features(params, Q, phi_a, phi_o, t=None, exact=True):
    """Filter a batch of states given precomputed features; returns (Q_next, scale, capped, cache)."""
    ext = extend(params, Q, exact=exact)
    Qn, cache = kbr_condition(ext.P_xi, ext.P_o, phi_a, phi_o, params.lam, t)
    Qn, scale, capped = apply_cap(Qn, params.cap)
    return Qn, scale, capped, cache


def prediction_inputs(params, Q, phi_a):
    """Regressors q (x) phi_a (with a trailing 1 in bias mode), shape (n, d_q*d_a[+1])."""
    n = len(Q)
    X = np.einsum("nq,na->nqa", Q.reshape(n, -1), phi_a).reshape(n, -1)
    if params.pred_bias:
        X = np.concatenate([X, np.ones((n, 1))], axis=1)
    return X


def predict_observation(params, q, a):
    """W_pred (q (x) phi_a(a)); bilinear in (q, phi_a) unless W_pred carries a bias column."""
    flat, lead = _as_batch(params, q)
    phi_a = np.atleast_2d(params.pipeline.phi_act(np.asarray(a, dtype=float).reshape(len(flat), -1)))
    if phi_a.shape[1] != params.d_a:
        raise DimensionError(f"action features have dim {phi_a.shape[1]}, expected {params.d_a}")
    pred = prediction_inputs(params, flat.reshape(-1, params.d_fo, params.d_fa), phi_a) @ params.W_pred.T
    return pred.reshape(lead + (-1,))


def filter_trajectory(params, traj, return_caps=False):
    """States q_0 .. q_T for one trajectory (q_{t+1} follows (a_t, o_t))."""
    T = len(traj)
    states = np.empty((T + 1, params.d_fo, params.d_fa))
    states[0] = params.q0
    caps = 0
    if T:
        phi_a = params.pipeline.phi_act(traj.actions)
        phi_o = params.pipeline.phi_obs(traj.observations)
        Q = params.q0[None]
        for t in range(T):
            Q, _, capped, _ = filter_features(params, Q, phi_a[t:t + 1], phi_o[t:t + 1], t=t)
            states[t + 1] = Q[0]
            caps += int(capped[0])
    return (states, caps) if return_caps else states
