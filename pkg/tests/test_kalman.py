import math

import numpy as np
import pytest
import torch

from conftest import cv_matrices, numpy_kalman
from kalmanbase.exceptions import DataError, NumericalError
from kalmanbase.kalman import (
    CvModel, CvParams, GaussianState, as_tensor, innovate, inv2x2, predict_step, process_noise, rollout,
    update,
)


def _params(rng):
    L = np.tril(rng.normal(size=(2, 2))) + np.diag([1.0, 1.0])
    R = np.array([[0.3, 0.05], [0.05, 0.2]])
    bias = rng.normal(size=4)
    M = rng.normal(size=(4, 4))
    return CvParams(L, R, bias, M @ M.T + np.eye(4))


def test_matrices_match_constant_velocity_model():
    m = CvModel(0.2)
    A, E, H = cv_matrices(0.2)
    np.testing.assert_array_equal(m.A.numpy(), A)
    np.testing.assert_allclose(m.E.numpy(), E)
    np.testing.assert_array_equal(m.H.numpy(), H)


def test_rollout_matches_numpy_oracle(rng):
    p = _params(rng)
    Z = np.cumsum(rng.normal(size=(15, 2)), axis=0)
    A, E, H = cv_matrices(0.2)
    Qa = p.q_factor.numpy()
    Q = E @ Qa @ Qa.T @ E.T
    x0 = np.array([Z[0, 0], 0, Z[0, 1], 0]) + p.init_state_bias.numpy()
    means, covs = numpy_kalman(Z, A, Q, H, p.r_obs.numpy(), x0, p.init_cov.numpy(), 25)
    pred, _ = rollout(Z, p)
    np.testing.assert_allclose(pred.z_hat, means, atol=1e-10, rtol=0)
    np.testing.assert_allclose(pred.cov, covs, atol=1e-10, rtol=1e-12)


def test_batched_rollout_equals_per_sample(rng):
    p = _params(rng)
    Z = rng.normal(size=(5, 15, 2)).cumsum(axis=1)
    batch, _ = rollout(Z, p)
    for i in range(5):
        one, _ = rollout(Z[i], p)
        np.testing.assert_allclose(batch.z_hat[i], one.z_hat, atol=1e-12)
        np.testing.assert_allclose(batch.cov[i], one.cov, atol=1e-12)


def test_constant_velocity_prediction_on_exact_line():
    # noise-free straight line at 10 m/s with a near-perfect observation model
    t = np.arange(15) * 0.2
    Z = np.stack([10 * t, np.zeros(15)], axis=1)
    p = CvParams(np.eye(2) * 1e-3, np.eye(2) * 1e-8, np.zeros(4), np.diag([1e-6, 1e4, 1e-6, 1e4]))
    pred, _ = rollout(Z, p)
    expected = Z[-1, 0] + 10 * 0.2 * np.arange(1, 26)
    np.testing.assert_allclose(pred.z_hat[:, 0], expected, atol=1e-3)
    np.testing.assert_allclose(pred.z_hat[:, 1], 0, atol=1e-9)


def test_single_predict_step_by_hand():
    m = CvModel(0.2)
    s = GaussianState(as_tensor([1.0, 2.0, 3.0, 4.0]), torch.eye(4, dtype=torch.float64))
    q = process_noise(m.E, torch.eye(2, dtype=torch.float64))
    out = predict_step(s, m, q)
    np.testing.assert_allclose(out.x_hat.numpy(), [1.4, 2.0, 3.8, 4.0])
    # var(x) = 1 + dt^2 * 1 + (dt^2/2)^2
    assert out.P[0, 0].item() == pytest.approx(1 + 0.04 + 0.0004)


def test_inv2x2_matches_linalg(rng):
    M = rng.normal(size=(10, 2, 2))
    S = as_tensor(M @ np.swapaxes(M, 1, 2) + np.eye(2))
    inv, det = inv2x2(S)
    np.testing.assert_allclose(inv.numpy(), np.linalg.inv(S.numpy()), rtol=1e-12)
    np.testing.assert_allclose(det.numpy(), np.linalg.det(S.numpy()), rtol=1e-12)


def test_singular_innovation_reports_condition_number():
    m = CvModel()
    s = GaussianState(torch.zeros(4, dtype=torch.float64), torch.zeros(4, 4, dtype=torch.float64))
    res, S = innovate(as_tensor([1.0, 1.0]), s, m, torch.zeros(2, 2, dtype=torch.float64))
    with pytest.raises(NumericalError, match="condition number"):
        update(s, res, S, m)


def test_covariance_stays_symmetric_psd(rng):
    p = _params(rng)
    pred, final = rollout(rng.normal(size=(15, 2)), p)
    np.testing.assert_allclose(final.P, final.P.T, atol=1e-12)
    assert np.linalg.eigvalsh(pred.cov).min() > 0


def test_prediction_covariance_grows(rng):
    pred, _ = rollout(rng.normal(size=(15, 2)), _params(rng))
    tr = np.trace(pred.cov, axis1=-2, axis2=-1)
    assert np.all(np.diff(tr) > 0)


def test_translation_equivariance(rng):
    p = _params(rng)
    Z = rng.normal(size=(15, 2)).cumsum(0)
    a, _ = rollout(Z, p)
    b, _ = rollout(Z + [7.0, -3.0], p)
    np.testing.assert_allclose(b.z_hat, a.z_hat + [7.0, -3.0], atol=1e-9)
    np.testing.assert_allclose(b.cov, a.cov, atol=1e-12)


@pytest.mark.parametrize("bad", [np.zeros((15, 3)), np.full((15, 2), np.nan)])
def test_rollout_rejects_bad_history(bad):
    with pytest.raises(DataError):
        rollout(bad, CvParams())


def test_params_dict_round_trip(rng):
    p = _params(rng)
    q = CvParams.from_dict(p.to_dict())
    for a, b in zip(p._tensors(), q._tensors()):
        assert torch.equal(a, b)
    with pytest.raises(DataError):
        CvParams.from_dict({"format": "other"})


def test_process_cov_is_factor_outer_product(rng):
    p = _params(rng)
    L = p.q_factor.numpy()
    np.testing.assert_allclose(p.process_cov.numpy(), L @ L.T)
    assert math.isclose(float(torch.det(p.process_cov)), np.linalg.det(L) ** 2, rel_tol=1e-10)
