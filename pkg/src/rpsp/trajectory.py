"""Episode container and the columnar batch file format.

Batch files are numpy ``.npz`` archives with the columns

    format      : int, always 1
    lengths     : (M,) int64 episode lengths
    terminated  : (M,) bool
    actions     : (sum(lengths), dim_a) float64, episodes concatenated
    observations: (sum(lengths), dim_o) float64
    rewards     : (sum(lengths),) float64

Row ``sum(lengths[:i]) + t`` holds step ``t`` of episode ``i``.
"""

from dataclasses import dataclass

import numpy as np

BATCH_FORMAT_VERSION = 1


@dataclass
class Trajectory:
    """One episode. ``observations[t]`` is what the agent saw after executing ``actions[t]``."""

    actions: np.ndarray
    observations: np.ndarray
    rewards: np.ndarray
    terminated: bool = False

    def __post_init__(self):
        self.actions = _as_columns(self.actions)
        self.observations = _as_columns(self.observations)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        n = len(self.rewards)
        if len(self.actions) != n or len(self.observations) != n:
            raise ValueError(
                f"length mismatch: actions={len(self.actions)} observations={len(self.observations)} rewards={n}"
            )

    def __len__(self):
        return len(self.rewards)

    @property
    def total_reward(self):
        return float(self.rewards.sum())


def _as_columns(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def save_batch(path, trajectories):
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("cannot save an empty batch")
    np.savez(
        path,
        format=np.int64(BATCH_FORMAT_VERSION),
        lengths=np.array([len(t) for t in trajectories], dtype=np.int64),
        terminated=np.array([t.terminated for t in trajectories], dtype=bool),
        actions=np.concatenate([t.actions for t in trajectories]),
        observations=np.concatenate([t.observations for t in trajectories]),
        rewards=np.concatenate([t.rewards for t in trajectories]),
    )


def load_batch(path):
    with np.load(path) as f:
        if int(f["format"]) != BATCH_FORMAT_VERSION:
            raise ValueError(f"unsupported batch format {int(f['format'])}")
        bounds = np.concatenate([[0], np.cumsum(f["lengths"])])
        acts, obs, rews = f["actions"], f["observations"], f["rewards"]
        return [
            Trajectory(acts[s:e], obs[s:e], rews[s:e], bool(term))
            for s, e, term in zip(bounds[:-1], bounds[1:], f["terminated"])
        ]
