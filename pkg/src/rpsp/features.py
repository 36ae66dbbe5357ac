"""Random Fourier features of the RBF kernel, randomized PCA, and the
per-step feature pipeline used by the predictive-state filter.

Feature classes (dims in parentheses):

    obs         phi_o(o_t)                    (d_o)
    act         phi_a(a_t)                    (d_a)
    future_obs  psi_o(o_t .. o_{t+k-1})       (d_fo)
    future_act  psi_a(a_t .. a_{t+k-1})       (d_fa)
    history     h(a_{t-w}, o_{t-w} .. a_{t-1}, o_{t-1})   (d_h)

Every map is RFF -> centered PCA, followed by a constant 1 coordinate when
``bias`` is set. The constant lets linear operators on features carry means.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .errors import InvalidConfigurationError

log = logging.getLogger(__name__)

DEFAULT_SEQUENCE_FEATURES = 1000
DEFAULT_IMMEDIATE_FEATURES = 200


def rowwise_matmul(x, W):
    """``x @ W`` computed one row at a time, so each row's bits do not depend on the batch."""
    x = np.asarray(x, dtype=float)
    return (x[..., None, :] @ W)[..., 0, :]


@dataclass(frozen=True)
class RFFMap:
    frequencies: np.ndarray  # (D, input_dim)
    offsets: np.ndarray  # (D,)
    bandwidth: float

    @property
    def D(self):
        return self.frequencies.shape[0]

    @property
    def input_dim(self):
        return self.frequencies.shape[1]

    def __call__(self, x):
        return np.sqrt(2.0 / self.D) * np.cos(rowwise_matmul(x, self.frequencies.T) + self.offsets)


def build_rff_map(bandwidth, D, input_dim, seed):
    if not bandwidth > 0:
        raise InvalidConfigurationError(f"bandwidth must be positive, got {bandwidth}")
    if D < 1 or input_dim < 1:
        raise InvalidConfigurationError(f"need D >= 1 and input_dim >= 1, got D={D}, input_dim={input_dim}")
    rng = np.random.default_rng(seed)
    freqs = rng.normal(0.0, 1.0 / bandwidth, size=(D, input_dim))
    offsets = rng.uniform(0.0, 2 * np.pi, size=D)
    return RFFMap(freqs, offsets, float(bandwidth))


@dataclass(frozen=True)
class PCAProjection:
    basis: np.ndarray  # (d, D), orthonormal rows
    mean: np.ndarray  # (D,)

    @property
    def d(self):
        return self.basis.shape[0]

    def __call__(self, x):
        return rowwise_matmul(np.asarray(x, dtype=float) - self.mean, self.basis.T)

    def lift(self, z):
        return np.asarray(z, dtype=float) @ self.basis + self.mean


def fit_randomized_pca(samples, d, oversampling=10, seed=0, power_iters=2):
    """Top-``d`` principal subspace by a randomized range finder with power iterations."""
    X = np.asarray(samples, dtype=float)
    N, D = X.shape
    if d < 1 or d > min(N, D):
        raise InvalidConfigurationError(f"target dim d={d} must lie in [1, min(N, D)={min(N, D)}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    rng = np.random.default_rng(seed)
    width = min(d + oversampling, N, D)
    Y = Xc @ rng.standard_normal((D, width))
    for _ in range(power_iters):
        Q, _ = np.linalg.qr(Y)
        Q, _ = np.linalg.qr(Xc.T @ Q)
        Y = Xc @ Q
    Q, _ = np.linalg.qr(Y)
    _, _, Vt = np.linalg.svd(Q.T @ Xc, full_matrices=False)
    return PCAProjection(np.ascontiguousarray(Vt[:d]), mean)


def median_bandwidth(samples, max_samples=1000, seed=0):
    """Median pairwise Euclidean distance over a random subset (falls back to 1)."""
    X = np.asarray(samples, dtype=float)
    if len(X) > max_samples:
        X = X[np.random.default_rng(seed).choice(len(X), max_samples, replace=False)]
    if len(X) < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    return med if med > 1e-12 else 1.0


@dataclass(frozen=True)
class FeatureMap:
    rff: RFFMap
    pca: PCAProjection
    bias: bool = True

    @property
    def dim(self):
        return self.pca.d + int(self.bias)

    def __call__(self, x):
        z = self.pca(self.rff(x))
        if self.bias:
            z = np.concatenate([z, np.ones(z.shape[:-1] + (1,))], axis=-1)
        return z


@dataclass(frozen=True)
class ConstantMap:
    """Single constant coordinate; the history map when the window is empty."""

    @property
    def dim(self):
        return 1

    def __call__(self, x):
        return np.ones(np.shape(x)[:-1] + (1,))


@dataclass(frozen=True)
class IndicatorMap:
    """One-hot encoding of a scalar integer input; used for discrete systems."""

    n: int

    @property
    def dim(self):
        return self.n

    def __call__(self, x):
        idx = np.asarray(x).reshape(np.shape(x)[:-1] if np.ndim(x) > 0 else ()).astype(int)
        return np.eye(self.n)[idx]


def fit_feature_map(samples, D, d, seed, bias=True, bandwidth=None):
    """RFF (median-heuristic bandwidth unless given) followed by PCA to ``d - bias`` dims."""
    samples = np.asarray(samples, dtype=float)
    ss = np.random.SeedSequence(seed)
    s_bw, s_rff, s_pca = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    if bandwidth is None:
        bandwidth = median_bandwidth(samples, seed=s_bw)
    rff = build_rff_map(bandwidth, D, samples.shape[1], s_rff)
    target = d - int(bias)
    if target < 1:
        raise InvalidConfigurationError(f"feature dim {d} too small for bias={bias}")
    pca = fit_randomized_pca(rff(samples), target, seed=s_pca)
    return FeatureMap(rff, pca, bias)


@dataclass(frozen=True)
class FeaturePipeline:
    obs: object
    act: object
    future_obs: object = None
    future_act: object = None
    history: object = None
    k: int = 1
    w_h: int = 1
    obs_dim: int = 1
    act_dim: int = 1
    action_low: np.ndarray = None
    action_high: np.ndarray = None

    @property
    def d_o(self):
        return self.obs.dim

    @property
    def d_a(self):
        return self.act.dim

    @property
    def d_fo(self):
        return self.future_obs.dim

    @property
    def d_fa(self):
        return self.future_act.dim

    @property
    def d_h(self):
        return self.history.dim

    @property
    def d_xi_obs(self):
        return self.d_fo * self.d_o + self.d_o * self.d_o

    @property
    def d_xi_act(self):
        return self.d_fa * self.d_a

    def clip_actions(self, a):
        a = np.asarray(a, dtype=float)
        if self.action_low is None:
            return a
        return np.clip(a, self.action_low, self.action_high)

    def phi_obs(self, o):
        return self.obs(o)

    def phi_act(self, a):
        return self.act(self.clip_actions(a))


@dataclass
class PerStepFeatures:
    """Features at every valid step; extended features are derived on demand."""

    traj_index: np.ndarray  # (n,)
    t: np.ndarray  # (n,) time index within its trajectory
    phi_o: np.ndarray  # (n, d_o)
    phi_a: np.ndarray  # (n, d_a)
    psi_o: np.ndarray  # (n, d_fo) window starting at t
    psi_a: np.ndarray  # (n, d_fa)
    psi_o_next: np.ndarray  # (n, d_fo) window starting at t+1
    psi_a_next: np.ndarray  # (n, d_fa)
    h: np.ndarray  # (n, d_h)

    def __len__(self):
        return len(self.t)

    @property
    def xi_obs(self):
        n = len(self)
        skipped = np.einsum("nf,ni->nfi", self.psi_o_next, self.phi_o).reshape(n, -1)
        present = np.einsum("ni,nj->nij", self.phi_o, self.phi_o).reshape(n, -1)
        return np.concatenate([skipped, present], axis=1)

    @property
    def xi_act(self):
        return np.einsum("ng,na->nga", self.psi_a_next, self.phi_a).reshape(len(self), -1)

    @staticmethod
    def concatenate(parts):
        fields = PerStepFeatures.__dataclass_fields__
        return PerStepFeatures(**{f: np.concatenate([getattr(p, f) for p in parts]) for f in fields})


def valid_steps(T, k, w_h):
    """Steps with a full history window and a full shifted future window."""
    return np.arange(w_h, max(w_h, T - k))


def _future_windows(x, ts, k):
    return np.stack([x[ts + j] for j in range(k)], axis=1).reshape(len(ts), -1)


def _history_windows(actions, observations, ts, w):
    pairs = np.concatenate([actions, observations], axis=1)
    width = pairs.shape[1]
    out = np.zeros((len(ts), w * width))
    for j in range(w):
        src = ts - w + j
        ok = src >= 0
        out[ok, j * width:(j + 1) * width] = pairs[src[ok]]
    return out


def _raw_windows(pipeline, traj):
    """Raw (pre-feature) windows at valid steps, or None if too short."""
    k, w = pipeline.k, pipeline.w_h
    ts = valid_steps(len(traj), k, w)
    if len(ts) == 0:
        return None
    acts = pipeline.clip_actions(traj.actions)
    obs = traj.observations
    return dict(
        t=ts,
        o=obs[ts],
        a=acts[ts],
        fo=_future_windows(obs, ts, k),
        fa=_future_windows(acts, ts, k),
        fo_next=_future_windows(obs, ts + 1, k),
        fa_next=_future_windows(acts, ts + 1, k),
        h=_history_windows(acts, obs, ts, w),
    )


def featurize_trajectory(pipeline, traj, index=0):
    """Per-step features of one trajectory, or None if it is too short."""
    raw = _raw_windows(pipeline, traj)
    if raw is None:
        return None
    n = len(raw["t"])
    return PerStepFeatures(
        traj_index=np.full(n, index),
        t=raw["t"],
        phi_o=pipeline.obs(raw["o"]),
        phi_a=pipeline.act(raw["a"]),
        psi_o=pipeline.future_obs(raw["fo"]),
        psi_a=pipeline.future_act(raw["fa"]),
        psi_o_next=pipeline.future_obs(raw["fo_next"]),
        psi_a_next=pipeline.future_act(raw["fa_next"]),
        h=pipeline.history(raw["h"]),
    )


def featurize_batch(pipeline, trajectories):
    """Featurize every trajectory; returns (features, n_skipped)."""
    parts, skipped = [], 0
    for i, traj in enumerate(trajectories):
        f = featurize_trajectory(pipeline, traj, index=i)
        if f is None:
            skipped += 1
        else:
            parts.append(f)
    if skipped:
        log.warning("skipped %d trajectories shorter than k + 1 + w_h = %d",
                    skipped, pipeline.k + 1 + pipeline.w_h)
    if not parts:
        return None, skipped
    return PerStepFeatures.concatenate(parts), skipped


def fit_pipeline(trajectories, k=2, w_h=None, d=20, d_future=5, d_immediate=None,
                 n_sequence=DEFAULT_SEQUENCE_FEATURES, n_immediate=DEFAULT_IMMEDIATE_FEATURES,
                 action_low=None, action_high=None, seed=0):
    """Fit all five feature maps on exploration trajectories (fit once, then frozen)."""
    if k < 1:
        raise InvalidConfigurationError("future window k must be >= 1")
    w_h = k if w_h is None else w_h
    d_immediate = min(d, 10) if d_immediate is None else d_immediate
    trajectories = list(trajectories)
    obs_dim = trajectories[0].observations.shape[1]
    act_dim = trajectories[0].actions.shape[1]
    low = None if action_low is None else np.asarray(action_low, dtype=float)
    high = None if action_high is None else np.asarray(action_high, dtype=float)
    shell = FeaturePipeline(None, None, k=k, w_h=w_h, obs_dim=obs_dim, act_dim=act_dim,
                            action_low=low, action_high=high)
    raws = [r for r in (_raw_windows(shell, t) for t in trajectories) if r is not None]
    if not raws:
        raise InvalidConfigurationError("no trajectory is long enough to fit features")
    cols = {key: np.concatenate([r[key] for r in raws]) for key in ("o", "a", "fo", "fa", "h")}
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(5)]
    obs_map = fit_feature_map(cols["o"], n_immediate, d_immediate, seeds[0])
    act_map = fit_feature_map(cols["a"], n_immediate, d_immediate, seeds[1])
    fo_map = fit_feature_map(cols["fo"], n_sequence, d_future, seeds[2])
    fa_map = fit_feature_map(cols["fa"], n_sequence, d_future, seeds[3])
    h_map = fit_feature_map(cols["h"], n_sequence, d, seeds[4]) if w_h > 0 else ConstantMap()
    return FeaturePipeline(obs_map, act_map, fo_map, fa_map, h_map, k=k, w_h=w_h,
                           obs_dim=obs_dim, act_dim=act_dim, action_low=low, action_high=high)
