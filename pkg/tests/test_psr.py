import numpy as np
import pytest

from hmm_oracle import belief_update, exact_psr, predictive, random_hmm, random_sizes, sample
from rpsp import psr as P
from rpsp.errors import DimensionError, FilterDegeneracyError
from rpsp.gradcore import tiny_instance
from rpsp.trajectory import Trajectory


@pytest.fixture
def tiny():
    psr, _, trajs, _ = tiny_instance(seed=3)
    return psr, trajs


def test_extend_zero_state_gives_zero_tensors(tiny):
    psr, _ = tiny
    ext = P.extend(psr, np.zeros((psr.d_fo, psr.d_fa)))
    assert not ext.P_xi.any() and not ext.P_o.any()
    assert ext.P_xi.shape == (psr.d_fo, psr.d_o, psr.d_fa, psr.d_a)
    assert ext.P_o.shape == (psr.d_o, psr.d_o, psr.d_a)


def test_extend_is_linear(tiny):
    psr, _ = tiny
    rng = np.random.default_rng(0)
    q1, q2 = rng.normal(size=(2, psr.d_fo, psr.d_fa))
    a, b = 0.7, -1.3
    lhs = P.extend(psr, a * q1 + b * q2).flatten()
    rhs = a * P.extend(psr, q1).flatten() + b * P.extend(psr, q2).flatten()
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_condition_with_zero_extension_is_zero(tiny):
    psr, trajs = tiny
    ext = P.extend(psr, psr.q0)
    ext = P.ExtendedState(np.zeros_like(ext.P_xi), ext.P_o)
    q = P.condition(ext, trajs[0].actions[0], trajs[0].observations[0], psr.pipeline, psr.lam)
    assert not q.any()


def test_condition_decays_as_one_over_lambda(tiny):
    psr, trajs = tiny
    ext = P.extend(psr, psr.q0)
    a, o = trajs[0].actions[0], trajs[0].observations[0]
    n2 = np.linalg.norm(P.condition(ext, a, o, psr.pipeline, 1e2))
    n4 = np.linalg.norm(P.condition(ext, a, o, psr.pipeline, 1e4))
    assert n2 / n4 == pytest.approx(100.0, rel=0.05)


def test_two_state_hmm_filter_is_exact_bayes():
    hmm = random_hmm(np.random.default_rng(11), S=2, O=2, A=2)
    psr = exact_psr(hmm, lam=1e-8)
    acts, obs = sample(hmm, np.random.default_rng(12), 30)
    states = P.filter_trajectory(psr, Trajectory(acts[:, None], obs[:, None], np.zeros(30)))
    b = hmm.b0
    for t in range(30):
        np.testing.assert_allclose(states[t], predictive(hmm, b), atol=1e-6)
        b = belief_update(hmm, b, acts[t], obs[t])
    np.testing.assert_allclose(states[30], predictive(hmm, b), atol=1e-6)


def test_kbr_exact_on_random_hmms():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(25):
        hmm = random_hmm(rng, *random_sizes(rng))
        psr = exact_psr(hmm, lam=1e-8)
        acts, obs = sample(hmm, rng, 25)
        states = P.filter_trajectory(psr, Trajectory(acts[:, None], obs[:, None], np.zeros(25)))
        b = hmm.b0
        for t in range(26):
            worst = max(worst, np.abs(states[t] - predictive(hmm, b)).max())
            if t < 25:
                b = belief_update(hmm, b, acts[t], obs[t])
    assert worst <= 1e-5


def test_filter_is_condition_after_extend(tiny):
    psr, trajs = tiny
    a, o = trajs[0].actions[1], trajs[0].observations[1]
    q = psr.q0 + 0.1
    expect = P.condition(P.extend(psr, q[None]), a[None], o[None], psr.pipeline, psr.lam)[0]
    got, capped = P.filter_step(psr, q, a, o)
    assert not capped
    assert np.array_equal(got, expect)


def test_repeated_filtering_stays_finite(tiny):
    psr, _ = tiny
    # With C = 0 and large extension weights the unconstrained recursion grows geometrically.
    wild = psr.replace(W_ext_xi=psr.W_ext_xi * 50.0, W_ext_o=np.zeros_like(psr.W_ext_o), cap=1e3)
    a, o = np.array([0.4]), np.array([0.3, -0.2])
    phi_a, phi_o = wild.pipeline.phi_act(a[None]), wild.pipeline.phi_obs(o[None])
    Q = wild.q0[None]
    caps = 0
    for _ in range(10_000):
        Q, _, capped, _ = P.filter_features(wild, Q, phi_a, phi_o)
        caps += int(capped[0])
    assert np.all(np.isfinite(Q))
    assert np.linalg.norm(Q) <= wild.cap * (1 + 1e-12)
    assert caps > 0


def test_apply_cap_rescales_only_large_states():
    Q = np.stack([np.full((2, 2), 1.0), np.full((2, 2), 100.0)])
    out, scale, capped = P.apply_cap(Q, cap=10.0)
    assert capped.tolist() == [False, True]
    assert np.array_equal(out[0], Q[0])
    assert np.linalg.norm(out[1]) == pytest.approx(10.0)
    assert scale[1] == pytest.approx(10.0 / 200.0)


def test_predict_zero_map_gives_zero(tiny):
    psr, trajs = tiny
    zero = psr.replace(W_pred=np.zeros_like(psr.W_pred))
    assert not P.predict_observation(zero, psr.q0, trajs[0].actions[0]).any()


def test_predict_is_linear_in_state(tiny):
    psr, trajs = tiny
    rng = np.random.default_rng(1)
    q1, q2 = rng.normal(size=(2, psr.d_fo, psr.d_fa))
    a = trajs[0].actions[2]
    lhs = P.predict_observation(psr, 2.0 * q1 - 0.5 * q2, a)
    rhs = 2.0 * P.predict_observation(psr, q1, a) - 0.5 * P.predict_observation(psr, q2, a)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_filter_trajectory_lengths_and_determinism(tiny):
    psr, trajs = tiny
    empty = Trajectory(np.zeros((0, 1)), np.zeros((0, 2)), np.zeros(0))
    states = P.filter_trajectory(psr, empty)
    assert states.shape == (1, psr.d_fo, psr.d_fa)
    assert np.array_equal(states[0], psr.q0)
    s1 = P.filter_trajectory(psr, trajs[0])
    s2 = P.filter_trajectory(psr, Trajectory(trajs[0].actions.copy(), trajs[0].observations.copy(),
                                             trajs[0].rewards.copy()))
    assert len(s1) == len(trajs[0]) + 1
    assert np.array_equal(s1, s2)


def test_singular_kbr_system_raises_with_time_step():
    P_xi = np.zeros((1, 1, 2, 1, 1))
    P_o = np.zeros((1, 2, 2, 1))
    P_o[0, :, :, 0] = -1e-3 * np.eye(2)
    with pytest.raises(FilterDegeneracyError) as info:
        P.kbr_condition(P_xi, P_o, np.ones((1, 1)), np.ones((1, 2)), lam=1e-3, t=7)
    assert info.value.t == 7


def test_mismatched_state_shape_raises(tiny):
    psr, _ = tiny
    with pytest.raises(DimensionError):
        P.extend(psr, np.zeros((psr.d_fo + 1, psr.d_fa)))


def test_nonpositive_lambda_rejected(tiny):
    psr, _ = tiny
    with pytest.raises(DimensionError):
        psr.replace(lam=0.0)
