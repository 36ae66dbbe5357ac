"""Partially observable environments, the blind exploration policy, and
trajectory collection.

All environments follow the same protocol: ``reset()`` returns the initial
observation (unused by the agents), ``step(a)`` executes a clipped action and
returns ``(observation, reward, done)``. Observations never include
velocities.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import InvalidConfigurationError
from .trajectory import Trajectory


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    noise: float = 0.0

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidConfigurationError("horizon must be >= 1")
        if self.noise < 0:
            raise InvalidConfigurationError("observation noise must be >= 0")


class PoCartPole:
    """Continuous-force cart-pole observing only cart position and pole angle."""

    gravity = 9.8
    mass_cart = 1.0
    mass_pole = 0.1
    half_length = 0.5
    force_mag = 10.0
    dt = 0.02
    angle_limit = 12 * np.pi / 180
    position_limit = 2.4

    def __init__(self, seed=0, horizon=200):
        self.spec = EnvSpec("po_cartpole", 2, 1, np.array([-1.0]), np.array([1.0]), horizon)
        self.rng = np.random.default_rng(seed)
        self.state = np.zeros(4)
        self.t = 0

    def observe(self):
        return self.state[[0, 2]].copy()

    def reset(self, state=None):
        self.state = self.rng.uniform(-0.05, 0.05, 4) if state is None else np.asarray(state, dtype=float).copy()
        self.t = 0
        return self.observe()

    def step(self, action):
        a = float(np.clip(np.ravel(action)[0], -1.0, 1.0))
        force = self.force_mag * a
        x, x_dot, theta, theta_dot = self.state
        total = self.mass_cart + self.mass_pole
        pole_ml = self.mass_pole * self.half_length
        cos, sin = np.cos(theta), np.sin(theta)
        temp = (force + pole_ml * theta_dot ** 2 * sin) / total
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.half_length * (4.0 / 3.0 - self.mass_pole * cos ** 2 / total))
        x_acc = temp - pole_ml * theta_acc * cos / total
        x = x + self.dt * x_dot
        x_dot = x_dot + self.dt * x_acc
        theta = theta + self.dt * theta_dot
        theta_dot = theta_dot + self.dt * theta_acc
        self.state = np.array([x, x_dot, theta, theta_dot])
        self.t += 1
        fell = abs(theta) > self.angle_limit or abs(x) > self.position_limit
        done = fell or self.t >= self.spec.horizon
        return self.observe(), 1.0, done


class PoPendulum:
    """Torque-controlled pendulum (theta = 0 upright) observing (cos, sin) of the angle."""

    gravity = 10.0
    mass = 1.0
    length = 1.0
    dt = 0.05
    max_torque = 2.0
    max_speed = 8.0

    def __init__(self, seed=0, horizon=500):
        self.spec = EnvSpec("po_pendulum", 2, 1, np.array([-self.max_torque]), np.array([self.max_torque]), horizon)
        self.rng = np.random.default_rng(seed)
        self.state = np.zeros(2)
        self.t = 0

    def observe(self):
        return np.array([np.cos(self.state[0]), np.sin(self.state[0])])

    def reset(self, state=None):
        if state is None:
            state = [self.rng.uniform(-np.pi, np.pi), self.rng.uniform(-1.0, 1.0)]
        self.state = np.asarray(state, dtype=float).copy()
        self.t = 0
        return self.observe()

    def step(self, action):
        u = float(np.clip(np.ravel(action)[0], -self.max_torque, self.max_torque))
        theta, theta_dot = self.state
        angle = (theta + np.pi) % (2 * np.pi) - np.pi
        reward = -(angle ** 2 + 0.1 * u ** 2)
        g, m, l = self.gravity, self.mass, self.length
        theta_dot = theta_dot + (3 * g / (2 * l) * np.sin(theta) + 3.0 / (m * l ** 2) * u) * self.dt
        theta_dot = float(np.clip(theta_dot, -self.max_speed, self.max_speed))
        theta = theta + theta_dot * self.dt
        self.state = np.array([theta, theta_dot])
        self.t += 1
        return self.observe(), reward, self.t >= self.spec.horizon


def _lds_defaults():
    # The input gain makes the known action a large share of the observation
    # variance, so history-aware prediction clearly beats predicting the mean.
    A = np.array([[0.9, 0.3], [-0.3, 0.6]])
    B = np.array([[0.0], [2.0]])
    C = np.array([[1.0, 0.0]])
    return A, B, C, 0.1 * np.eye(2), 0.3 * np.eye(1)


class SyntheticLDS:
    """x' = A x + B a + w,  o = C x' + v, with a steady-state Kalman oracle.

    Episodes start from the steady-state posterior covariance, so the
    steady-state Kalman predictor is optimal from the first step on.
    Reward penalizes the noiseless output and the control effort.
    """

    def __init__(self, seed=0, horizon=50, A=None, B=None, C=None, Q=None, R=None):
        dA, dB, dC, dQ, dR = _lds_defaults()
        self.A = dA if A is None else np.atleast_2d(np.asarray(A, dtype=float))
        self.B = dB if B is None else np.atleast_2d(np.asarray(B, dtype=float))
        self.C = dC if C is None else np.atleast_2d(np.asarray(C, dtype=float))
        n = self.A.shape[0]
        self.Q = dQ if Q is None else np.asarray(Q, dtype=float).reshape(n, n)
        self.R = dR if R is None else np.asarray(R, dtype=float).reshape(len(self.C), len(self.C))
        radius = np.max(np.abs(np.linalg.eigvals(self.A)))
        if radius > 0.9 + 1e-12:
            raise InvalidConfigurationError(f"spectral radius {radius:.3f} exceeds 0.9")
        d_a = self.B.shape[1]
        self.spec = EnvSpec("synthetic_lds", len(self.C), d_a, -np.ones(d_a), np.ones(d_a), horizon)
        self.rng = np.random.default_rng(seed)
        self.x = np.zeros(n)
        self.t = 0
        self._oracle = None

    @property
    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def oracle(self):
        """(P_pred, P_post, gain, mse) of the steady-state Kalman predictor."""
        if self._oracle is None:
            P = linalg.solve_discrete_are(self.A.T, self.C.T, self.Q, self.R)
            S = self.C @ P @ self.C.T + self.R
            K = P @ self.C.T @ np.linalg.inv(S)
            P_post = P - K @ self.C @ P
            self._oracle = (P, (P_post + P_post.T) / 2, K, float(np.trace(S)))
        return self._oracle

    def oracle_mse(self):
        return self.oracle()[3]

    def oracle_predict(self, actions, observations):
        """Steady-state Kalman one-step predictions of o_t from (a_0..a_t, o_0..o_{t-1})."""
        _, _, K, _ = self.oracle()
        actions = np.asarray(actions, dtype=float).reshape(len(actions), -1)
        actions = np.clip(actions, self.spec.action_low, self.spec.action_high)
        observations = np.asarray(observations, dtype=float).reshape(len(observations), -1)
        x = np.zeros(self.A.shape[0])
        preds = np.empty_like(observations)
        for t in range(len(actions)):
            x = self.A @ x + self.B @ actions[t]
            preds[t] = self.C @ x
            x = x + K @ (observations[t] - preds[t])
        return preds

    def reset(self, x0=None):
        if x0 is not None:
            self.x = np.asarray(x0, dtype=float).copy()
        elif np.any(self.Q) or np.any(self.R):
            _, P_post, _, _ = self.oracle()
            self.x = self.rng.multivariate_normal(np.zeros(len(self.A)), P_post)
        else:
            self.x = np.zeros(len(self.A))
        self.t = 0
        return self.C @ self.x

    def step(self, action):
        a = np.clip(np.asarray(action, dtype=float).reshape(-1), self.spec.action_low, self.spec.action_high)
        w = self.rng.multivariate_normal(np.zeros(len(self.A)), self.Q) if np.any(self.Q) else 0.0
        self.x = self.A @ self.x + self.B @ a + w
        clean = self.C @ self.x
        v = self.rng.multivariate_normal(np.zeros(len(self.C)), self.R) if np.any(self.R) else 0.0
        self.t += 1
        reward = -float(clean @ clean + 0.1 * a @ a)
        return clean + v, reward, self.t >= self.spec.horizon


class NoisyObservation:
    """Adds i.i.d. N(0, sigma^2) to each observation coordinate; rewards use the true state."""

    def __init__(self, env, sigma, seed=0):
        if sigma < 0:
            raise InvalidConfigurationError("noise sigma must be >= 0")
        self.env = env
        self.sigma = float(sigma)
        self.rng = np.random.default_rng(seed)
        s = env.spec
        self.spec = EnvSpec(s.name, s.obs_dim, s.act_dim, s.action_low, s.action_high, s.horizon, self.sigma)

    def _noisy(self, o):
        if self.sigma == 0:
            return o
        return o + self.sigma * self.rng.standard_normal(o.shape)

    def reset(self, *args, **kwargs):
        return self._noisy(self.env.reset(*args, **kwargs))

    def step(self, action):
        o, r, done = self.env.step(action)
        return self._noisy(o), r, done


def with_observation_noise(env, sigma, seed=0):
    return NoisyObservation(env, sigma, seed)


ENVIRONMENTS = {
    "po_cartpole": PoCartPole,
    "po_pendulum": PoPendulum,
    "synthetic_lds": SyntheticLDS,
}

# KBR regularizer per environment. The control tasks need the larger value:
# their estimated conditional covariances are indefinite often enough that
# smaller values let filtered states blow up once the policy starts to move.
DEFAULT_LAMBDA = {"po_cartpole": 1.0, "po_pendulum": 1.0, "synthetic_lds": 0.3}


def make_env(name, seed=0, horizon=None, noise=0.0):
    if name not in ENVIRONMENTS:
        raise InvalidConfigurationError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}")
    cls = ENVIRONMENTS[name]
    env = cls(seed=seed) if horizon is None else cls(seed=seed, horizon=horizon)
    if noise:
        ss = np.random.SeedSequence([seed, 7919])
        env = with_observation_noise(env, noise, seed=int(ss.generate_state(1)[0]))
    return env


def blind_exploration_policy(spec, rng):
    """I.i.d. Gaussian action (std = half the bound), clipped; ignores observations."""
    half = (spec.action_high - spec.action_low) / 2
    center = (spec.action_high + spec.action_low) / 2
    a = center + (half / 2) * rng.standard_normal(spec.act_dim)
    return np.clip(a, spec.action_low, spec.action_high)


def _episode_seeds(rng, M):
    return [int(s) for s in rng.integers(0, 2 ** 63 - 1, size=M)]


def collect_blind(env_fn, M, rng):
    """M exploration episodes under the blind policy."""
    trajs = []
    for seed in _episode_seeds(rng, M):
        env = env_fn(seed)
        env.reset()
        acts, obs, rews = [], [], []
        done = False
        while not done:
            a = blind_exploration_policy(env.spec, rng)
            o, r, done = env.step(a)
            acts.append(a)
            obs.append(o)
            rews.append(r)
        trajs.append(Trajectory(np.array(acts), np.array(obs), np.array(rews), terminated=True))
    return trajs


@dataclass
class Rollouts:
    trajectories: list
    states: list  # per trajectory, (T + 1, state_dim) tracker states seen by the policy
    cap_events: int = 0

    @property
    def n_steps(self):
        return sum(len(t) for t in self.trajectories)


def collect_trajectories(env_fn, agent, M, rng):
    """Roll out M episodes in lock-step, filtering online and sampling from the policy.

    ``agent`` supplies ``start(n)``, ``inputs(state)``, ``advance(state, rows, a, o)``,
    ``distribution(inputs)`` and ``tracker_vector(state)``.
    """
    if M == 0:
        return Rollouts([], [], 0)
    envs = [env_fn(seed) for seed in _episode_seeds(rng, M)]
    for env in envs:
        env.reset()
    spec = envs[0].spec
    state = agent.start(M)
    acts = [[] for _ in range(M)]
    obs = [[] for _ in range(M)]
    rews = [[] for _ in range(M)]
    seen = [[agent.tracker_vector(state)[i]] for i in range(M)]
    alive = np.arange(M)
    caps = 0
    while len(alive):
        dist = agent.distribution(agent.inputs(state)[alive])
        a = dist.mean + dist.std * rng.standard_normal(dist.mean.shape)
        o_batch = np.empty((len(alive), spec.obs_dim))
        done = np.zeros(len(alive), dtype=bool)
        for j, i in enumerate(alive):
            o, r, d = envs[i].step(np.clip(a[j], spec.action_low, spec.action_high))
            acts[i].append(a[j])
            obs[i].append(o)
            rews[i].append(r)
            o_batch[j] = o
            done[j] = d
        state, n_capped = agent.advance(state, alive, a, o_batch)
        caps += n_capped
        vec = agent.tracker_vector(state)
        for i in alive:
            seen[i].append(vec[i])
        alive = alive[~done]
    trajs = [Trajectory(np.array(acts[i]), np.array(obs[i]), np.array(rews[i]), terminated=True) for i in range(M)]
    return Rollouts(trajs, [np.array(s) for s in seen], caps)


def collect_batch(env_fn, agent, sample_budget, horizon, rng):
    """Complete episodes until at least ``sample_budget`` steps; waves of ceil(remaining / horizon)."""
    out = Rollouts([], [], 0)
    while out.n_steps < sample_budget:
        M = max(1, -(-(sample_budget - out.n_steps) // horizon))
        wave = collect_trajectories(env_fn, agent, M, rng)
        out.trajectories += wave.trajectories
        out.states += wave.states
        out.cap_events += wave.cap_events
    return out
