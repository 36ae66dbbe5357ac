import numpy as np
import pytest

from rpsp.errors import InvalidConfigurationError
from rpsp.features import (DEFAULT_IMMEDIATE_FEATURES, DEFAULT_SEQUENCE_FEATURES, ConstantMap, build_rff_map,
                           featurize_batch, featurize_trajectory, fit_pipeline, fit_randomized_pca, median_bandwidth,
                           valid_steps)
from rpsp.trajectory import Trajectory


def rbf(x, y, sigma):
    return np.exp(-np.sum((x - y) ** 2, axis=-1) / (2 * sigma ** 2))


def close_pairs(rng, n, dim, max_dist=2.0):
    x = rng.normal(size=(n, dim))
    d = rng.normal(size=(n, dim))
    d *= (rng.uniform(0, max_dist, n) / np.linalg.norm(d, axis=1))[:, None]
    return x, x + d


def random_trajs(rng, n=12, T=15, obs_dim=2):
    return [Trajectory(rng.uniform(-1, 1, (T, 1)), rng.normal(size=(T, obs_dim)), np.ones(T)) for _ in range(n)]


def test_rff_zero_input_is_scaled_cosine_of_offsets():
    m = build_rff_map(0.7, 50, 3, seed=1)
    np.testing.assert_allclose(m(np.zeros(3)), np.sqrt(2 / 50) * np.cos(m.offsets), atol=1e-15)


def test_rff_coordinates_bounded_and_deterministic():
    m = build_rff_map(1.3, 200, 2, seed=4)
    x = np.random.default_rng(0).normal(scale=10, size=(500, 2))
    assert np.all(np.abs(m(x)) <= np.sqrt(2 / 200) + 1e-15)
    again = build_rff_map(1.3, 200, 2, seed=4)
    assert np.array_equal(m.frequencies, again.frequencies) and np.array_equal(m.offsets, again.offsets)


def test_rff_default_feature_count():
    assert DEFAULT_SEQUENCE_FEATURES == 1000
    assert DEFAULT_IMMEDIATE_FEATURES == 200


def rff_error_variance(x, y, sigma, D):
    """Exact variance of the D-feature estimate: each term cos(w.d) + cos(w.(x+y) + 2b) has variance
    Var[cos(w.d)] + 1/2, with Var[cos(w.d)] = (1 + k(2d)) / 2 - k(d)^2."""
    k1, k2 = rbf(x, y, sigma), rbf(2 * x, 2 * y, sigma)
    return ((1 + k2) / 2 - k1 ** 2 + 0.5) / D


def test_rff_approximates_rbf_kernel():
    rng = np.random.default_rng(0)
    m = build_rff_map(1.0, 1000, 3, seed=0)
    x, y = close_pairs(rng, 500, 3)
    dev = np.sum(m(x) * m(y), axis=1) - rbf(x, y, 1.0)
    assert np.sqrt(np.mean(dev ** 2)) <= 0.05
    # The per-pair spread is the Monte-Carlo spread, not a systematic error.
    np.testing.assert_allclose(np.mean(dev ** 2), np.mean(rff_error_variance(x, y, 1.0, 1000)), rtol=0.25)


def test_rff_kernel_error_falls_with_feature_count():
    rng = np.random.default_rng(1)
    x, y = close_pairs(rng, 1000, 2)
    k = rbf(x, y, 0.8)
    mse = []
    for D in (100, 300, 1000):
        errs = [np.mean((np.sum(m(x) * m(y), axis=1) - k) ** 2)
                for m in (build_rff_map(0.8, D, 2, seed=s) for s in range(5))]
        mse.append(np.mean(errs))
    assert mse[0] > mse[1] > mse[2]


@pytest.mark.parametrize("bandwidth, D", [(0.0, 10), (-1.0, 10), (1.0, 0)])
def test_rff_rejects_bad_arguments(bandwidth, D):
    with pytest.raises(InvalidConfigurationError):
        build_rff_map(bandwidth, D, 2, seed=0)


def test_pca_recovers_low_rank_data_exactly():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 2)) @ rng.normal(size=(2, 10)) + rng.normal(size=10)
    pca = fit_randomized_pca(X, 2, seed=0)
    np.testing.assert_allclose(pca.lift(pca(X)), X, atol=1e-8)
    np.testing.assert_allclose(pca.basis @ pca.basis.T, np.eye(2), atol=1e-10)


def test_pca_captures_top_variance_like_exact_svd():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(400, 60)) * np.linspace(3, 0.2, 60)
    d = 10
    pca = fit_randomized_pca(X, d, seed=1)
    Xc = X - X.mean(axis=0)
    exact = np.sum(np.linalg.svd(Xc, compute_uv=False)[:d] ** 2)
    captured = np.sum((Xc @ pca.basis.T) ** 2)
    assert captured >= 0.99 * exact
    np.testing.assert_allclose(pca.basis @ pca.basis.T, np.eye(d), atol=1e-10)


def test_pca_projection_is_idempotent():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 20))
    pca = fit_randomized_pca(X, 5, seed=0)
    once = pca.lift(pca(X))
    np.testing.assert_allclose(pca.lift(pca(once)), once, atol=1e-10)


def test_pca_rejects_oversized_target():
    with pytest.raises(InvalidConfigurationError):
        fit_randomized_pca(np.ones((5, 3)), 4)


def test_median_bandwidth_matches_direct_median():
    x = np.array([[0.0], [1.0], [3.0]])
    assert median_bandwidth(x) == pytest.approx(2.0)
    assert median_bandwidth(np.zeros((4, 2))) == 1.0


@pytest.mark.parametrize("d", [10, 20, 30])
def test_pipeline_dimensions(d):
    pl = fit_pipeline(random_trajs(np.random.default_rng(d)), k=2, d=d, d_future=4, seed=0)
    assert pl.d_o == pl.d_a == min(d, 10)
    assert pl.d_fo == pl.d_fa == 4
    assert pl.d_h == d
    assert pl.d_xi_obs == pl.d_fo * pl.d_o + pl.d_o ** 2
    assert pl.d_xi_act == pl.d_fa * pl.d_a


def _zeros(T):
    return Trajectory(np.zeros((T, 1)), np.zeros((T, 2)), np.zeros(T))


@pytest.mark.parametrize("k, w_h", [(1, 0), (1, 1), (2, 2), (3, 1)])
def test_featurize_count_is_length_minus_windows(k, w_h):
    pl = fit_pipeline(random_trajs(np.random.default_rng(0)), k=k, w_h=w_h, d=4, d_future=3, d_immediate=3, seed=0)
    for T in range(1, 12):
        f = featurize_trajectory(pl, _zeros(T))
        assert (0 if f is None else len(f)) == max(0, T - k - w_h)
    assert len(valid_steps(10, k, w_h)) == 10 - k - w_h


def test_empty_history_window_uses_constant_map():
    pl = fit_pipeline(random_trajs(np.random.default_rng(0)), k=1, w_h=0, d=4, d_future=3, d_immediate=3, seed=0)
    assert isinstance(pl.history, ConstantMap)
    np.testing.assert_array_equal(featurize_trajectory(pl, _zeros(5)).h, np.ones((4, 1)))


@pytest.mark.xfail(strict=True, reason="conflicts with the exact count max(0, T - k - w_h), which gives 2 here; "
                                       "the count rule is kept (see decisions ledger)")
def test_single_step_for_length_three_with_k1_and_no_history():
    pl = fit_pipeline(random_trajs(np.random.default_rng(0)), k=1, w_h=0, d=4, d_future=3, d_immediate=3, seed=0)
    assert len(featurize_trajectory(pl, _zeros(3))) == 1


def test_featurize_extended_dimensions():
    rng = np.random.default_rng(1)
    trajs = random_trajs(rng)
    pl = fit_pipeline(trajs, k=2, d=6, d_future=3, d_immediate=4, seed=0)
    f = featurize_trajectory(pl, trajs[0])
    assert f.xi_obs.shape == (len(f), pl.d_fo * pl.d_o + pl.d_o ** 2)
    assert f.xi_act.shape == (len(f), pl.d_fa * pl.d_a)


def test_constant_trajectory_gives_constant_features():
    rng = np.random.default_rng(2)
    pl = fit_pipeline(random_trajs(rng), k=2, w_h=2, d=6, d_future=3, d_immediate=4, seed=0)
    T = 12
    const = Trajectory(np.full((T, 1), 0.3), np.tile([0.5, -0.1], (T, 1)), np.zeros(T))
    f = featurize_trajectory(pl, const)
    # From t = w_h on, the history window no longer sees zero padding.
    for name in ("phi_o", "phi_a", "psi_o", "psi_a", "psi_o_next", "psi_a_next", "h"):
        arr = getattr(f, name)
        np.testing.assert_array_equal(arr, np.repeat(arr[:1], len(arr), axis=0))


def test_short_trajectories_are_skipped_not_fatal(caplog):
    rng = np.random.default_rng(3)
    trajs = random_trajs(rng)
    pl = fit_pipeline(trajs, k=2, d=6, d_future=3, d_immediate=4, seed=0)
    short = Trajectory(np.zeros((2, 1)), np.zeros((2, 2)), np.zeros(2))
    feats, skipped = featurize_batch(pl, [short, trajs[0], short])
    assert skipped == 2
    assert len(feats) == len(featurize_trajectory(pl, trajs[0]))
    assert "skipped 2" in caplog.text


def test_pipeline_is_deterministic_per_seed():
    trajs = random_trajs(np.random.default_rng(4))
    a = fit_pipeline(trajs, k=2, d=6, d_future=3, seed=7)
    b = fit_pipeline(trajs, k=2, d=6, d_future=3, seed=7)
    x = np.random.default_rng(0).normal(size=(5, 6))
    assert np.array_equal(a.history(x), b.history(x))
