import numpy as np
import pytest

from rpsp.baselines import (AGENTS, DEFAULT_OBS_WINDOW, FMAgent, augment_state, fm_state_update, observation_windows,
                            parse_agent)
from rpsp.config import ExperimentConfig
from rpsp.errors import InvalidConfigurationError
from rpsp.policy import init_policy
from rpsp.training import METRIC_COLUMNS, rpspo_train
from rpsp.trajectory import Trajectory


def test_window_of_one_is_current_observation():
    w = np.zeros(2)
    for o in np.random.default_rng(0).normal(size=(5, 2)):
        w = fm_state_update(w, o)
        np.testing.assert_array_equal(w, o)


def test_window_holds_last_w_observations_oldest_first():
    obs = np.arange(16.0).reshape(8, 2)
    w = np.zeros(5 * 2)
    for t, o in enumerate(obs):
        w = fm_state_update(w, o)
        expected = np.concatenate([np.zeros(2 * max(0, 4 - t)), obs[max(0, t - 4):t + 1].ravel()])
        np.testing.assert_array_equal(w, expected)


def test_observation_windows_exclude_current_step():
    traj = Trajectory(np.zeros((4, 1)), np.arange(4.0)[:, None], np.zeros(4))
    np.testing.assert_array_equal(observation_windows(traj, 2), [[0, 0], [0, 0], [0, 1], [1, 2]])


def test_augment_state():
    q = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(augment_state(q, np.zeros(0)), q.ravel())
    window = np.arange(6.0)
    out = augment_state(q, window)
    assert out.shape == (12 + 6,)
    np.testing.assert_array_equal(out[12:], window)


def test_agent_names_and_default_window():
    assert AGENTS == ("fm1", "fm2", "fm5", "rpsp-vrpg", "rpsp-alt", "rpsp-vrpg+obs", "rpsp-alt+obs")
    assert [parse_agent(f"fm{w}")["window"] for w in (1, 2, 5)] == [1, 2, 5]
    assert DEFAULT_OBS_WINDOW == 2
    assert parse_agent("rpsp-alt+obs") == dict(kind="rpsp", update="alt", window=2)
    assert parse_agent("rpsp-vrpg") == dict(kind="rpsp", update="vrpg", window=0)
    with pytest.raises(InvalidConfigurationError):
        parse_agent("gru")


def test_fm_window_must_be_positive():
    with pytest.raises(InvalidConfigurationError):
        FMAgent(init_policy(2, 1), 0, 2)


@pytest.mark.parametrize("agent", ["fm1", "fm5", "rpsp-alt+obs", "rpsp-vrpg+obs"])
def test_agents_share_training_loop_and_metric_schema(agent):
    cfg = ExperimentConfig(agent=agent, iters=2, batch_size=300, m_init=20).validate()
    res = rpspo_train(cfg, 0)
    assert len(res.metrics) == 2
    for row in res.metrics:
        assert tuple(row)[:len(METRIC_COLUMNS)] == METRIC_COLUMNS
        assert all(np.isfinite(v) for v in row.values())
    if agent.endswith("+obs"):
        assert res.policy.in_dim == res.psr.d_q + 2 * 2
    else:
        assert res.psr is None and res.policy.in_dim == int(agent[2:]) * 2
