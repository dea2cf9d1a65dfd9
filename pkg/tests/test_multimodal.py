import math

import numpy as np
import pytest
import torch

from kalmanbase.exceptions import ConfigError, DataError
from kalmanbase.kalman import CvParams, GaussianState, as_tensor, rollout
from kalmanbase.multimodal import (
    ExplorationSpec, ModeSet, apply_mode, exploration_samples, kmeans, predict_multimodal, quantize,
)


def grid_cell_mass(centroids, s_theta, s_alpha, n=1000):
    """Probability mass of each Voronoi cell by midpoint integration of the
    Gaussian density on an n x n grid over +-6 sigma (1-D for a zero std)."""
    mean = np.array([0.0, 1.0])
    axes, weights = [], []
    for m, s in zip(mean, (s_theta, s_alpha)):
        if s == 0:
            axes.append(np.array([m]))
            weights.append(np.array([1.0]))
        else:
            edges = np.linspace(m - 6 * s, m + 6 * s, n + 1)
            mid = 0.5 * (edges[1:] + edges[:-1])
            w = np.exp(-0.5 * ((mid - m) / s) ** 2) / (s * math.sqrt(2 * math.pi)) * np.diff(edges)
            axes.append(mid)
            weights.append(w)
    T, A = np.meshgrid(*axes, indexing="ij")
    W = np.outer(*weights)
    pts = np.stack([T.ravel(), A.ravel()], 1)
    d2 = ((pts[:, None, :] - centroids[None]) ** 2).sum(-1)
    lab = d2.argmin(1)
    mass = np.bincount(lab, weights=W.ravel(), minlength=len(centroids))
    return mass / mass.sum()


@pytest.mark.parametrize("s_theta, s_alpha", [(0.1, 0.1), (0.03, 0.1), (0.0, 0.1)])
@pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
def test_cell_probabilities_match_grid_integration(k, s_theta, s_alpha):
    modes = quantize(ExplorationSpec(s_theta, s_alpha, k, n_mc=100_000, seed=k))
    ref = grid_cell_mass(modes.centroids, s_theta, s_alpha)
    np.testing.assert_allclose(modes.probs, ref, atol=0.01)


def test_two_isotropic_modes_split_evenly():
    modes = quantize(ExplorationSpec(0.1, 0.1, 2))
    np.testing.assert_allclose(modes.probs, [0.5, 0.5], atol=0.01)


def test_single_mode_is_the_mean():
    modes = quantize(ExplorationSpec(0.2, 0.3, 1))
    np.testing.assert_array_equal(modes.centroids, [[0.0, 1.0]])
    assert modes.probs[0] == 1.0 and modes.cov_coeffs[0] == 1.0


def test_single_mode_pipeline_is_bitwise_unimodal(rng):
    p = CvParams(np.diag([0.7, 0.4]), np.eye(2) * 0.3)
    Z = rng.normal(size=(9, 15, 2)).cumsum(1)
    mix = predict_multimodal(Z, p, quantize(ExplorationSpec(0.1, 0.1, 1)))
    uni, _ = rollout(Z, p)
    assert np.array_equal(mix.means[:, 0], uni.z_hat)
    assert np.array_equal(mix.covs[:, 0], uni.cov)


def test_modes_are_sorted_and_coefficients_shrink():
    modes = quantize(ExplorationSpec(0.0, 0.1, 6))
    assert np.all(np.diff(modes.centroids[:, 1]) > 0)
    np.testing.assert_array_equal(modes.centroids[:, 0], 0.0)
    assert np.all((modes.cov_coeffs > 0) & (modes.cov_coeffs < 1))
    assert modes.probs.sum() == pytest.approx(1.0)


def test_degenerate_spec_all_samples_equal():
    modes = quantize(ExplorationSpec(0.0, 0.0, 3, n_mc=100))
    np.testing.assert_allclose(modes.centroids, [[0.0, 1.0]] * 3)
    np.testing.assert_array_equal(modes.cov_coeffs, 1.0)


def test_quantize_is_seeded():
    a = quantize(ExplorationSpec(0.05, 0.1, 4, n_mc=20_000, seed=3))
    b = quantize(ExplorationSpec(0.05, 0.1, 4, n_mc=20_000, seed=3))
    np.testing.assert_array_equal(a.centroids, b.centroids)


def test_kmeans_recovers_separated_clusters():
    r = np.random.default_rng(0)
    X = np.concatenate([r.normal(size=(500, 2)) * 0.1 + c for c in ([0, 0], [5, 0], [0, 5])])
    C, lab = kmeans(X, 3, r)
    C = C[np.lexsort((C[:, 1], C[:, 0]))]
    np.testing.assert_allclose(C, [[0, 0], [0, 5], [5, 0]], atol=0.05)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ExplorationSpec(-0.1, 0.1)
    with pytest.raises(ConfigError):
        ExplorationSpec(0.1, 0.1, k=0)
    with pytest.raises(ConfigError):
        ExplorationSpec(0.1, 0.1, k=6, n_mc=50)


def test_mode_set_round_trip():
    m = quantize(ExplorationSpec(0.02, 0.1, 3, n_mc=10_000))
    back = ModeSet.from_dict(m.to_dict())
    np.testing.assert_array_equal(back.centroids, m.centroids)
    assert back.spec == m.spec
    with pytest.raises(DataError):
        ModeSet.from_dict({"format": "nope"})


def test_apply_mode_rotates_and_scales_velocity():
    s = GaussianState(as_tensor([1.0, 10.0, 2.0, 0.0]), torch.eye(4, dtype=torch.float64))
    out = apply_mode(s, math.pi / 2, 0.5)
    np.testing.assert_allclose(out.x_hat.numpy(), [1.0, 0.0, 2.0, 5.0], atol=1e-12)
    assert out.P is s.P


def test_mode_covariance_scaled_by_squared_coefficient(rng):
    p = CvParams()
    modes = ModeSet(np.array([[0.0, 1.0], [0.0, 1.0]]), np.array([0.5, 0.5]), np.array([1.0, 0.5]))
    Z = rng.normal(size=(2, 15, 2))
    sq = predict_multimodal(Z, p, modes, cov_scale_power=2)
    lin = predict_multimodal(Z, p, modes, cov_scale_power=1)
    np.testing.assert_allclose(sq.covs[:, 1], 0.25 * sq.covs[:, 0])
    np.testing.assert_allclose(lin.covs[:, 1], 0.5 * lin.covs[:, 0])
    np.testing.assert_array_equal(sq.means[:, 0], sq.means[:, 1])
    with pytest.raises(ConfigError):
        predict_multimodal(Z, p, modes, cov_scale_power=3)


def test_velocity_factor_stretches_prediction():
    t = np.arange(15) * 0.2
    Z = np.stack([10 * t - 10 * t[-1], 0 * t], 1)
    p = CvParams(np.eye(2) * 1e-3, np.eye(2) * 1e-8, np.zeros(4), np.diag([1e-6, 1e4, 1e-6, 1e4]))
    modes = ModeSet(np.array([[0.0, 0.5], [0.0, 1.5]]), np.array([0.5, 0.5]), np.ones(2))
    mix = predict_multimodal(Z, p, modes)
    np.testing.assert_allclose(mix.means[:, -1, 0], [25.0, 75.0], rtol=1e-3)


def test_exploration_samples_identity_on_constant_velocity():
    t = np.arange(-14, 26) * 0.2
    xy = np.stack([12 * t, 0 * t], 1)
    p = CvParams(np.eye(2) * 1e-3, np.eye(2) * 1e-8, np.zeros(4), np.diag([1e-6, 1e4, 1e-6, 1e4]))
    v = exploration_samples(xy[None, :15], xy[None, 15:], p)
    np.testing.assert_allclose(v[0], [0.0, 1.0], atol=1e-4)
