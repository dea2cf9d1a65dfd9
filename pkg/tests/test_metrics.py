import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from kalmanbase.exceptions import DataError
from kalmanbase.metrics import (
    CovarianceAccumulator, MultiModalAccumulator, StepAccumulator, covariance_report, ellipse_params, fde,
    gaussian_entropy, miss_rate, mixture_nll, mnll, multimodal_metrics, nll_point, rmse, similarity,
    step_metrics,
)
from kalmanbase.multimodal import MixturePrediction

LN2PI = math.log(2 * math.pi)


def random_covs(rng, shape):
    M = rng.normal(size=(*shape, 2, 2))
    return M @ np.swapaxes(M, -1, -2) + 0.1 * np.eye(2)


# ---- direct values


def test_rmse_fde_trivial():
    e = np.tile([3.0, 4.0], (1, 5, 1))
    np.testing.assert_allclose(rmse(e), 5.0)
    np.testing.assert_allclose(fde(e), 5.0)
    two = np.array([[[0.0, 0.0]], [[3.0, 4.0]]])
    assert rmse(two)[0] == pytest.approx(math.sqrt(12.5))
    assert fde(two)[0] == pytest.approx(2.5)


def test_miss_rate_is_strict():
    assert miss_rate(np.array([[[2.0, 0.0]]]))[0] == 0.0
    assert miss_rate(np.array([[[2.0001, 0.0]]]))[0] == 1.0


@pytest.mark.parametrize("d, rho, expected", [
    ((0, 0), 0.0, LN2PI),
    ((1, 0), 0.0, 0.5 + LN2PI),
    ((1, 1), 0.5, 2 / 3 + 0.5 * math.log(0.75) + LN2PI),
])
def test_nll_point_examples(d, rho, expected):
    cov = np.array([[1.0, rho], [rho, 1.0]])
    assert nll_point(d[0], d[1], cov) == pytest.approx(expected, abs=1e-12)


def test_nll_point_matches_scipy(rng):
    covs = random_covs(rng, (50,))
    d = rng.normal(size=(50, 2))
    # ln(sx sy sqrt(1 - rho^2)) is half the log-determinant, so this is -log pdf
    ref = [-multivariate_normal(np.zeros(2), c).logpdf(x) for x, c in zip(d, covs)]
    np.testing.assert_allclose(nll_point(d[:, 0], d[:, 1], covs), ref, rtol=1e-12)


def test_nll_floor_keeps_degenerate_cov_finite():
    v = nll_point(0.1, 0.0, np.zeros((2, 2)))
    assert np.isfinite(v)


def test_mnll_identical_samples():
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    e = np.tile([0.5, -0.2], (7, 3, 1))
    np.testing.assert_allclose(mnll(e, np.broadcast_to(cov, (7, 3, 2, 2))), nll_point(0.5, -0.2, cov))


def test_entropy_is_expected_nll(rng):
    cov = np.array([[1.5, 0.4], [0.4, 0.8]])
    x = rng.multivariate_normal(np.zeros(2), cov, size=400_000)
    assert nll_point(x[:, 0], x[:, 1], cov).mean() == pytest.approx(gaussian_entropy(cov), abs=0.01)


def test_similarity_examples():
    eye = np.broadcast_to(np.eye(2), (2, 2, 2))
    assert similarity(np.zeros((2, 2)), eye) == pytest.approx((2 * math.pi) ** -2, rel=1e-12)
    assert similarity(np.array([[0.0, 0.0], [100.0, 0.0]]), eye) < 1e-100
    assert similarity(np.zeros((1, 2)), np.eye(2)[None]) is None


def test_mixture_nll_equal_modes_equals_single():
    assert mixture_nll(np.array([3.2, 3.2]), np.array([0.5, 0.5])) == pytest.approx(3.2, abs=1e-14)


def test_mixture_nll_no_underflow_at_large_values():
    v = mixture_nll(np.array([5000.0, 5001.0]), np.array([0.5, 0.5]))
    assert v == pytest.approx(5000.0 - math.log(0.5 + 0.5 * math.exp(-1.0)))


def test_ellipse_axes():
    major, minor, angle = ellipse_params(np.diag([4.0, 1.0]), level=2.0)
    assert (major, minor) == pytest.approx((4.0, 2.0))
    assert math.cos(angle) ** 2 == pytest.approx(1.0)


def test_covariance_report_exact_predictions():
    fut = np.random.default_rng(0).normal(size=(10, 25, 2))
    rep = covariance_report(fut, fut, np.broadcast_to(np.eye(2), (10, 25, 2, 2)))
    np.testing.assert_array_equal(rep.empirical, 0.0)
    np.testing.assert_array_equal(rep.bias, 0.0)
    with pytest.raises(DataError):
        covariance_report(fut[:1], fut[:1], np.eye(2)[None, None].repeat(25, 1))


def test_covariance_report_matches_numpy(rng):
    err = rng.normal(size=(300, 25, 2)) @ np.array([[1.0, 0.3], [0.0, 0.5]])
    covs = random_covs(rng, (300, 25))
    rep = covariance_report(err, np.zeros_like(err), covs)
    for i, k in enumerate([4, 14, 24]):
        np.testing.assert_allclose(rep.empirical[i], np.cov(err[:, k].T), rtol=1e-10)
        np.testing.assert_allclose(rep.predicted[i], covs[:, k].mean(0), rtol=1e-12)
    np.testing.assert_allclose(rep.fde_curve, np.abs(err).mean(0))


def test_empty_accumulator_reports_no_samples():
    with pytest.raises(DataError, match="no samples"):
        StepAccumulator(25).result()


# ---- naive oracle for the multi-modal family


def naive_multimodal(fut, means, covs, probs, thr=2.0):
    n, m, k = means.shape[:3]
    out = {name: np.zeros(k) for name in
           ("p_rmse", "rmse_maxp", "min_rmse", "p_fde", "fde_maxp", "min_fde", "nll_mm", "mr_mm", "sim")}
    imax = max(range(m), key=lambda j: (probs[j], -j))
    for i in range(n):
        finals = [math.dist(fut[i, -1], means[i, j, -1]) for j in range(m)]
        jmin = finals.index(min(finals))
        for s in range(k):
            d = [math.dist(fut[i, s], means[i, j, s]) for j in range(m)]
            out["p_rmse"][s] += sum(p * x * x for p, x in zip(probs, d))
            out["p_fde"][s] += sum(p * x for p, x in zip(probs, d))
            out["rmse_maxp"][s] += d[imax] ** 2
            out["fde_maxp"][s] += d[imax]
            out["min_rmse"][s] += d[jmin] ** 2
            out["min_fde"][s] += d[jmin]
            out["mr_mm"][s] += min(d) > thr
            like = sum(p * multivariate_normal(means[i, j, s], covs[i, j, s]).pdf(fut[i, s])
                       for j, p in enumerate(probs))
            out["nll_mm"][s] += -math.log(like)
            if m > 1:
                tot = 0.0
                for a in range(m):
                    for b in range(m):
                        if a != b:
                            pab = multivariate_normal(means[i, b, s], covs[i, b, s]).pdf(means[i, a, s])
                            pba = multivariate_normal(means[i, a, s], covs[i, a, s]).pdf(means[i, b, s])
                            tot += pab * pba
                out["sim"][s] += tot / (m * (m - 1))
    for key in out:
        out[key] /= n
    for key in ("p_rmse", "rmse_maxp", "min_rmse"):
        out[key] = np.sqrt(out[key])
    return out


def test_multimodal_against_naive(rng):
    n, m, k = 12, 3, 6
    fut = rng.normal(size=(n, k, 2)) * 2
    means = rng.normal(size=(n, m, k, 2)) * 2
    covs = random_covs(rng, (n, m, k))
    probs = np.array([0.2, 0.5, 0.3])
    got = multimodal_metrics(MixturePrediction(means, covs, probs, np.ones(m)), fut)
    ref = naive_multimodal(fut, means, covs, probs)
    for key, val in ref.items():
        np.testing.assert_allclose(getattr(got, key), val, rtol=1e-9, atol=1e-12, err_msg=key)


def test_single_mode_reduces_to_unimodal(rng):
    fut = rng.normal(size=(20, 25, 2))
    means = rng.normal(size=(20, 25, 2))
    covs = random_covs(rng, (20, 25))
    uni = step_metrics(fut, means, covs)
    mm = multimodal_metrics(MixturePrediction(means[:, None], covs[:, None], np.ones(1), np.ones(1)), fut)
    for a in ("p_rmse", "rmse_maxp", "min_rmse"):
        np.testing.assert_allclose(getattr(mm, a), uni.rmse, rtol=1e-12)
    for a in ("p_fde", "fde_maxp", "min_fde"):
        np.testing.assert_allclose(getattr(mm, a), uni.fde, rtol=1e-12)
    np.testing.assert_allclose(mm.nll_mm, uni.mnll, rtol=1e-12)
    np.testing.assert_array_equal(mm.mr_mm, uni.mr)
    assert mm.sim is None


def test_max_probability_tie_takes_first_mode():
    fut = np.zeros((1, 1, 2))
    means = np.array([[[[1.0, 0.0]], [[3.0, 0.0]]]])
    covs = np.broadcast_to(np.eye(2), (1, 2, 1, 2, 2))
    got = multimodal_metrics(MixturePrediction(means, covs, np.array([0.5, 0.5]), np.ones(2)), fut)
    assert got.fde_maxp[0] == 1.0


# ---- invariants

batches = st.tuples(st.integers(1, 30), st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31))


def _batch(n, k, m, seed):
    r = np.random.default_rng(seed)
    fut = r.normal(size=(n, k, 2)) * 3
    means = r.normal(size=(n, m, k, 2)) * 3
    covs = random_covs(r, (n, m, k))
    p = r.dirichlet(np.ones(m))
    return fut, means, covs, p


@settings(max_examples=60, deadline=None)
@given(batches)
def test_invariants(args):
    fut, means, covs, p = _batch(*args)
    uni = step_metrics(fut, means[:, 0], covs[:, 0])
    assert np.all(uni.rmse >= uni.fde - 1e-12) and np.all((uni.mr >= 0) & (uni.mr <= 1))
    mm = multimodal_metrics(MixturePrediction(means, covs, p, np.ones(len(p))), fut)
    assert mm.min_rmse[-1] <= mm.rmse_maxp[-1] + 1e-12 and mm.min_fde[-1] <= mm.fde_maxp[-1] + 1e-12
    assert mm.min_rmse[-1] <= mm.p_rmse[-1] + 1e-12
    # mr_mm never exceeds the unimodal rate of the max-probability trajectory set
    j = int(np.argmax(p))
    mr_max = step_metrics(fut, means[:, j], covs[:, j]).mr
    assert np.all(mm.mr_mm <= mr_max)


@settings(max_examples=60, deadline=None)
@given(batches)
def test_mixture_nll_sandwich(args):
    fut, means, covs, p = _batch(*args)
    err = fut[:, None] - means
    nll = np.moveaxis(nll_point(err[..., 0], err[..., 1], covs), 1, -1)  # (n, k, m)
    mm = mixture_nll(nll, p)
    assert np.all(mm <= np.min(nll - np.log(p), axis=-1) + 1e-9)
    assert np.all(mm >= nll.min(axis=-1) - 1e-9)


@settings(max_examples=40, deadline=None)
@given(batches, st.floats(0.1, 5.0), st.floats(0.0, 3.0))
def test_miss_rate_monotone_in_threshold(args, thr, extra):
    fut, means, _, _ = _batch(*args)
    e = fut - means[:, 0]
    assert np.all(miss_rate(e, thr + extra) <= miss_rate(e, thr))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**31), st.floats(-50, 50), st.floats(-50, 50))
def test_similarity_symmetry_and_translation(m, seed, tx, ty):
    r = np.random.default_rng(seed)
    means = r.normal(size=(m, 2))
    covs = random_covs(r, (m,))
    base = similarity(means, covs)
    perm = r.permutation(m)
    assert similarity(means[perm], covs[perm]) == pytest.approx(base, rel=1e-9, abs=1e-300)
    assert similarity(means + [tx, ty], covs) == pytest.approx(base, rel=1e-6, abs=1e-300)


@settings(max_examples=40, deadline=None)
@given(batches, st.integers(1, 5))
def test_accumulators_merge_equals_single_pass(args, cut):
    fut, means, covs, p = _batch(*args)
    n = len(fut)
    cut = min(cut, n)
    whole = MultiModalAccumulator(fut.shape[1]).update(fut, means, covs, p).result()
    parts = (MultiModalAccumulator(fut.shape[1]).update(fut[:cut], means[:cut], covs[:cut], p)
             + MultiModalAccumulator(fut.shape[1]).update(fut[cut:], means[cut:], covs[cut:], p)
             if cut < n else MultiModalAccumulator(fut.shape[1]).update(fut, means, covs, p)).result()
    for key in ("p_rmse", "min_fde", "nll_mm", "mr_mm"):
        np.testing.assert_allclose(getattr(parts, key), getattr(whole, key), rtol=1e-12)
    if 2 <= cut < n - 1:
        k = fut.shape[1]
        one = CovarianceAccumulator(k).update(fut, means[:, 0], covs[:, 0]).result(dt=1.0, seconds=(k,))
        merged = (CovarianceAccumulator(k).update(fut[:cut], means[:cut, 0], covs[:cut, 0])
                  + CovarianceAccumulator(k).update(fut[cut:], means[cut:, 0], covs[cut:, 0]))
        rep = merged.result(dt=1.0, seconds=(k,))
        np.testing.assert_allclose(rep.empirical, one.empirical, rtol=1e-9, atol=1e-12)
