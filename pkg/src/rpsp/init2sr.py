"""Two-stage (instrumental) regression initialization of the PSR parameters.

Stage 1 regresses outer products of future/extended features on history
features and forms per-step conditional operators. Stage 2 fits the linear
extension map between the denoised predictive and extended states. The
observation map is then fitted on filtered states.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import psr as psr_mod
from .errors import InitializationDataError, RPSPError, SingularityError
from .features import featurize_batch, fit_pipeline

log = logging.getLogger(__name__)

CHUNK = 2048


@dataclass
class Stage1Estimates:
    traj_index: np.ndarray  # (n,)
    t: np.ndarray  # (n,)
    Q: np.ndarray  # (n, d_fo, d_fa)
    P: np.ndarray  # (n, d_p) flattened [P_xi, P_o]
    weights: np.ndarray = None

    def __len__(self):
        return len(self.t)


@dataclass
class PSRConfig:
    k: int = 2
    w_h: int = None
    d: int = 20
    d_future: int = 5
    d_immediate: int = None
    n_sequence: int = 1000
    n_immediate: int = 200
    lam: float = psr_mod.DEFAULT_LAMBDA
    cap: float = psr_mod.DEFAULT_STATE_CAP
    ridge_stage1: float = 3e-2
    ridge_stage2: float = 1e-3
    ridge_pred: float = 1e-4
    pred_bias: bool = False
    seed: int = 0


def _normalize_weights(weights, n):
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    return w / w.sum()


def ridge_regression(X, Y, ridge, weights=None, bias=False):
    """Coefficients B minimizing sum_i w_i |Y_i - X_i B|^2 + ridge |B|^2 (weights sum to 1).

    With ``bias`` a constant column is appended to X (and its coefficient is
    the last row of B).
    """
    X = np.asarray(X, dtype=float)
    if bias:
        X = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    w = _normalize_weights(weights, len(X))
    Xw = X * w[:, None]
    G = X.T @ Xw + ridge * np.eye(X.shape[1])
    if ridge == 0 and np.linalg.matrix_rank(G) < G.shape[0]:
        raise SingularityError("rank-deficient regression with ridge = 0; use a positive ridge")
    return np.linalg.solve(G, Xw.T @ Y)


def _conditional_operators(S, coef_num, coef_den, ridge):
    """Per-row C_num(h) (C_den(h) + ridge I)^{-1} with C(h) = S @ coef."""
    n, d_h = S.shape
    num = (S @ coef_num.reshape(d_h, -1)).reshape((n,) + coef_num.shape[1:])
    den = (S @ coef_den.reshape(d_h, -1)).reshape((n,) + coef_den.shape[1:]) + ridge * np.eye(coef_den.shape[1])
    # X den = num  <=>  den^T X^T = num^T
    out = np.linalg.solve(den.transpose(0, 2, 1), num.transpose(0, 2, 1)).transpose(0, 2, 1)
    return out.reshape(n, -1)


def _moment(H, w, left, right):
    """sum_i w_i h_i (x) left_i (x) right_i, shape (d_h, dim(left), dim(right))."""
    Hw = H * w[:, None]
    out = np.zeros((H.shape[1], left.shape[1] * right.shape[1]))
    for s in range(0, len(H), CHUNK):
        outer = np.einsum("nx,ny->nxy", left[s:s + CHUNK], right[s:s + CHUNK]).reshape(-1, out.shape[1])
        out += Hw[s:s + CHUNK].T @ outer
    return out.reshape(H.shape[1], left.shape[1], right.shape[1])


def stage1_regression(features, ridge=3e-2, weights=None):
    """Joint stage-1 regression on history features (instruments)."""
    H = features.h
    n, d_h = H.shape
    if n < d_h + 1:
        raise InitializationDataError(f"stage 1 needs at least {d_h + 1} valid steps, got {n}")
    w = _normalize_weights(weights, n)
    G = H.T @ (H * w[:, None]) + ridge * np.eye(d_h)
    S = np.linalg.solve(G, H.T).T  # rows map a history to regression coefficients

    f = features
    n_fo, n_fa, d_o, d_a = f.psi_o.shape[1], f.psi_a.shape[1], f.phi_o.shape[1], f.phi_a.shape[1]
    xo = np.einsum("nf,ni->nfi", f.psi_o_next, f.phi_o).reshape(n, -1)
    xa = f.xi_act
    oo = np.einsum("ni,nj->nij", f.phi_o, f.phi_o).reshape(n, -1)
    coefs = {
        "oa": _moment(H, w, f.psi_o, f.psi_a),
        "aa": _moment(H, w, f.psi_a, f.psi_a),
        "xo": _moment(H, w, xo, xa),
        "xa": _moment(H, w, xa, xa),
        "oo": _moment(H, w, oo, f.phi_a),
        "a": _moment(H, w, f.phi_a, f.phi_a),
    }
    Q = np.empty((n, n_fo, n_fa))
    P = np.empty((n, n_fo * d_o * n_fa * d_a + d_o * d_o * d_a))
    split = n_fo * d_o * n_fa * d_a
    for s in range(0, n, CHUNK):
        Sc = S[s:s + CHUNK]
        Q[s:s + CHUNK] = _conditional_operators(Sc, coefs["oa"], coefs["aa"], ridge).reshape(-1, n_fo, n_fa)
        P[s:s + CHUNK, :split] = _conditional_operators(Sc, coefs["xo"], coefs["xa"], ridge)
        P[s:s + CHUNK, split:] = _conditional_operators(Sc, coefs["oo"], coefs["a"], ridge)
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(P))):
        raise InitializationDataError("stage 1 produced non-finite estimates")
    return Stage1Estimates(f.traj_index.copy(), f.t.copy(), Q, P, None if weights is None else w)


def stage2_regression(est, ridge=1e-3, d_xi=None):
    """Fit p = W_ext q by ridge least squares; returns (W_ext_xi, W_ext_o).

    ``d_xi`` is the length of the xi block of p (everything else is the o block).
    """
    X = est.Q.reshape(len(est), -1)
    if len(est) < X.shape[1] + 1:
        raise InitializationDataError(f"stage 2 needs at least {X.shape[1] + 1} estimate pairs, got {len(est)}")
    W = ridge_regression(X, est.P, ridge, est.weights).T
    if d_xi is None:
        return W, None
    return W[:d_xi], W[d_xi:]


def filter_states(params, trajectories):
    """Filtered states for each trajectory, computed in one length-sorted batch."""
    trajectories = list(trajectories)
    out = [np.empty((len(tr) + 1, params.d_fo, params.d_fa)) for tr in trajectories]
    for o in out:
        o[0] = params.q0
    order = sorted(range(len(trajectories)), key=lambda i: -len(trajectories[i]))
    if not order or len(trajectories[order[0]]) == 0:
        return out
    phi_a = [params.pipeline.phi_act(trajectories[i].actions) for i in order]
    phi_o = [params.pipeline.phi_obs(trajectories[i].observations) for i in order]
    lengths = np.array([len(trajectories[i]) for i in order])
    Q = np.repeat(params.q0[None], len(order), axis=0)
    for t in range(lengths[0]):
        n = int(np.sum(lengths > t))
        fa = np.stack([phi_a[j][t] for j in range(n)])
        fo = np.stack([phi_o[j][t] for j in range(n)])
        Q, _, _, _ = psr_mod.filter_features(params, Q[:n], fa, fo, t=t, exact=False)
        for j in range(n):
            out[order[j]][t + 1] = Q[j]
    return out


def fit_w_pred(params, trajectories, ridge=1e-4, bias=False):
    """Regress raw observations on q_t (x) phi_a(a_t) over filtered steps."""
    states = filter_states(params, trajectories)
    probe = params.replace(W_pred=np.zeros((1, params.d_q * params.d_a + int(bias))))
    X = np.concatenate([
        psr_mod.prediction_inputs(probe, s[:-1], params.pipeline.phi_act(tr.actions))
        for s, tr in zip(states, trajectories) if len(tr)
    ])
    Y = np.concatenate([tr.observations for tr in trajectories if len(tr)])
    return ridge_regression(X, Y, ridge).T


def initialize_psr(trajectories, config=None, pipeline=None, action_low=None, action_high=None):
    """Full two-stage initialization from blind-exploration trajectories."""
    cfg = config or PSRConfig()
    trajectories = list(trajectories)
    try:
        if pipeline is None:
            pipeline = fit_pipeline(trajectories, k=cfg.k, w_h=cfg.w_h, d=cfg.d, d_future=cfg.d_future,
                                    d_immediate=cfg.d_immediate, n_sequence=cfg.n_sequence,
                                    n_immediate=cfg.n_immediate, action_low=action_low,
                                    action_high=action_high, seed=cfg.seed)
        feats, _ = featurize_batch(pipeline, trajectories)
        if feats is None:
            raise InitializationDataError("no trajectory long enough for stage 1")
    except RPSPError as exc:
        raise InitializationDataError(f"features: {exc}") from exc
    try:
        est = stage1_regression(feats, cfg.ridge_stage1)
    except RPSPError as exc:
        raise InitializationDataError(f"stage 1: {exc}") from exc
    d_xi = pipeline.d_fo * pipeline.d_o * pipeline.d_fa * pipeline.d_a
    try:
        W_xi, W_o = stage2_regression(est, cfg.ridge_stage2, d_xi=d_xi)
    except RPSPError as exc:
        raise InitializationDataError(f"stage 2: {exc}") from exc
    first = est.t == est.t.min()
    q0 = est.Q[first].mean(axis=0)
    d_q = q0.size
    params = psr_mod.PSRParams(q0, W_xi, W_o, np.zeros((pipeline.obs_dim, d_q * pipeline.d_a + int(cfg.pred_bias))),
                               d_o=pipeline.d_o, d_a=pipeline.d_a, lam=cfg.lam, cap=cfg.cap, pipeline=pipeline)
    try:
        W_pred = fit_w_pred(params, trajectories, cfg.ridge_pred, bias=cfg.pred_bias)
    except RPSPError as exc:
        raise InitializationDataError(f"observation map: {exc}") from exc
    return params.replace(W_pred=W_pred)


def random_psr(pipeline, cfg=None, seed=0, ext_scale=0.1):
    """Randomly initialized PSR with the same feature pipeline (ablation baseline).

    Extension weights have std ext_scale / sqrt(d_q); the default matches the
    magnitude regression produces on the control tasks, so the random filter
    starts out as well conditioned as a fitted one.
    """
    cfg = cfg or PSRConfig()
    rng = np.random.default_rng(seed)
    d_fo, d_fa, d_o, d_a = pipeline.d_fo, pipeline.d_fa, pipeline.d_o, pipeline.d_a
    d_q = d_fo * d_fa
    scale = 1.0 / np.sqrt(d_q)
    return psr_mod.PSRParams(
        q0=rng.normal(0, scale, (d_fo, d_fa)),
        W_ext_xi=rng.normal(0, ext_scale * scale, (d_fo * d_o * d_fa * d_a, d_q)),
        W_ext_o=rng.normal(0, ext_scale * scale, (d_o * d_o * d_a, d_q)),
        W_pred=rng.normal(0, 1.0 / np.sqrt(d_q * d_a), (pipeline.obs_dim, d_q * d_a + int(cfg.pred_bias))),
        d_o=d_o, d_a=d_a, lam=cfg.lam, cap=cfg.cap, pipeline=pipeline,
    )
