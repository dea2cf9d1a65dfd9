"""Per-step evaluation indicators and the covariance calibration report.

Everything is in meters and nats. Metric state is held in accumulators that
add up sufficient statistics, so a test set can be processed in chunks and
merged in a fixed order with the same result as one pass.

Array conventions: errors and futures are (N, K, 2); unimodal covariances
(N, K, 2, 2); mixtures carry a mode axis after the sample axis, i.e. means
(N, M, K, 2), covariances (N, M, K, 2, 2) and probabilities (N, M) or (M,).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError

MISS_THRESHOLD = 2.0
SIGMA_FLOOR = 1e-3
RHO_CAP = 0.999
LOG_2PI = math.log(2 * math.pi)
REPORT_SECONDS = (1.0, 3.0, 5.0)


# --------------------------------------------------------------------------
# direct formulas


def _distances(errors):
    errors = np.asarray(errors, dtype=float)
    return np.sqrt(errors[..., 0] ** 2 + errors[..., 1] ** 2)


def rmse(errors) -> np.ndarray:
    errors = np.asarray(errors, dtype=float)
    return np.sqrt(np.mean(np.sum(errors**2, axis=-1), axis=0))


def fde(errors) -> np.ndarray:
    return np.mean(_distances(errors), axis=0)


def miss_rate(errors, threshold: float = MISS_THRESHOLD) -> np.ndarray:
    return np.mean(_distances(errors) > threshold, axis=0)


def nll_point(dx, dy, cov) -> np.ndarray:
    """Bivariate Gaussian NLL in nats: half the Mahalanobis term, plus
    ``ln(sx sy sqrt(1 - rho^2))``, plus ``ln(2 pi)``.

    Stds are floored at 1 mm and the correlation capped at 0.999 so that a
    degenerate covariance still gives a finite value.
    """
    cov = np.asarray(cov, dtype=float)
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float)
    sx = np.sqrt(np.maximum(cov[..., 0, 0], SIGMA_FLOOR**2))
    sy = np.sqrt(np.maximum(cov[..., 1, 1], SIGMA_FLOOR**2))
    rho = np.clip(cov[..., 0, 1] / (sx * sy), -RHO_CAP, RHO_CAP)
    one_m_rho2 = 1.0 - rho**2
    quad = (dx**2 / sx**2 + dy**2 / sy**2 - 2 * rho * dx * dy / (sx * sy)) / one_m_rho2
    return 0.5 * quad + np.log(sx * sy * np.sqrt(one_m_rho2)) + LOG_2PI


def mnll(errors, covs) -> np.ndarray:
    errors = np.asarray(errors, dtype=float)
    return np.mean(nll_point(errors[..., 0], errors[..., 1], covs), axis=0)


def gaussian_entropy(cov) -> np.ndarray:
    """Differential entropy (nats) of a 2-D Gaussian: the expected NLL of a
    perfectly calibrated prediction."""
    return 1.0 + LOG_2PI + 0.5 * np.log(np.linalg.det(np.asarray(cov, dtype=float)))


def similarity(means, covs):
    """Mode-similarity indicator at one step.

    ``means`` (..., M, 2), ``covs`` (..., M, 2, 2). Averages over ordered
    pairs ``i != j`` the product of each component's density at the other's
    mean. Returns ``None`` when there is a single component.
    """
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    m = means.shape[-2]
    if m < 2:
        return None
    # dens[..., i, j]: density of component j evaluated at the mean of component i
    d = means[..., :, None, :] - means[..., None, :, :]
    dens = np.exp(-nll_point(d[..., 0], d[..., 1], covs[..., None, :, :, :]))
    prod = dens * np.swapaxes(dens, -1, -2)
    off = ~np.eye(m, dtype=bool)
    return prod[..., off].sum(axis=-1) / (m * (m - 1))


def mixture_nll(nll_modes, probs) -> np.ndarray:
    """``-log(sum_i p_i exp(-NLL_i))`` along the mode axis (axis -1), shifted
    by the smallest component NLL to avoid underflow."""
    nll_modes = np.asarray(nll_modes, dtype=float)
    probs = np.asarray(probs, dtype=float)
    shift = nll_modes.min(axis=-1, keepdims=True)
    s = np.sum(probs * np.exp(-(nll_modes - shift)), axis=-1)
    return shift[..., 0] - np.log(s)


def ellipse_params(cov, level: float = 1.0):
    """Semi-axes (major, minor) in meters and orientation (radians from +x)
    of the ``level``-sigma ellipse."""
    cov = np.asarray(cov, dtype=float)
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    w = np.clip(w, 0.0, None)
    angle = math.atan2(V[1, 1], V[0, 1])
    return level * math.sqrt(w[1]), level * math.sqrt(w[0]), angle


# --------------------------------------------------------------------------
# accumulators


@dataclass
class StepMetrics:
    rmse: np.ndarray
    fde: np.ndarray
    mr: np.ndarray
    mnll: np.ndarray

    FIELDS = ("rmse", "fde", "mr", "mnll")
    UNITS = {"rmse": "m", "fde": "m", "mr": "rate", "mnll": "nats"}


@dataclass
class StepAccumulator:
    horizon: int
    threshold: float = MISS_THRESHOLD
    n: int = 0
    sum_sq: np.ndarray = None
    sum_dist: np.ndarray = None
    n_miss: np.ndarray = None
    sum_nll: np.ndarray = None

    def __post_init__(self):
        for name in ("sum_sq", "sum_dist", "n_miss", "sum_nll"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.horizon))

    def update(self, futures, means, covs) -> StepAccumulator:
        err = np.asarray(futures, dtype=float) - np.asarray(means, dtype=float)
        _check_steps(err, self.horizon)
        dist = _distances(err)
        self.n += err.shape[0]
        self.sum_sq += np.sum(dist**2, axis=0)
        self.sum_dist += np.sum(dist, axis=0)
        self.n_miss += np.sum(dist > self.threshold, axis=0)
        self.sum_nll += np.sum(nll_point(err[..., 0], err[..., 1], covs), axis=0)
        return self

    def merge(self, other: StepAccumulator) -> StepAccumulator:
        return StepAccumulator(self.horizon, self.threshold, self.n + other.n,
                               self.sum_sq + other.sum_sq, self.sum_dist + other.sum_dist,
                               self.n_miss + other.n_miss, self.sum_nll + other.sum_nll)

    __add__ = merge

    def result(self) -> StepMetrics:
        if self.n == 0:
            raise DataError("no samples")
        n = self.n
        return StepMetrics(np.sqrt(self.sum_sq / n), self.sum_dist / n, self.n_miss / n, self.sum_nll / n)


@dataclass
class MultiModalMetrics:
    p_rmse: np.ndarray
    rmse_maxp: np.ndarray
    min_rmse: np.ndarray
    p_fde: np.ndarray
    fde_maxp: np.ndarray
    min_fde: np.ndarray
    nll_mm: np.ndarray
    mr_mm: np.ndarray
    sim: np.ndarray | None

    FIELDS = ("p_rmse", "rmse_maxp", "min_rmse", "p_fde", "fde_maxp", "min_fde", "nll_mm", "mr_mm", "sim")
    UNITS = {"p_rmse": "m", "rmse_maxp": "m", "min_rmse": "m", "p_fde": "m", "fde_maxp": "m",
             "min_fde": "m", "nll_mm": "nats", "mr_mm": "rate", "sim": "1/m^4"}


def _check_steps(err, horizon):
    if err.shape[-2] != horizon:
        raise DataError(f"expected {horizon} prediction steps, got {err.shape[-2]}")


def _mode_probs(probs, n, m):
    p = np.asarray(probs, dtype=float)
    if p.ndim == 1:
        p = np.broadcast_to(p, (n, m))
    return p


@dataclass
class MultiModalAccumulator:
    horizon: int
    threshold: float = MISS_THRESHOLD
    n: int = 0
    sums: dict = field(default_factory=dict)
    n_sim: int = 0

    KEYS = ("p_sq", "maxp_sq", "min_sq", "p_dist", "maxp_dist", "min_dist", "nll_mm", "miss_mm", "sim")

    def __post_init__(self):
        for key in self.KEYS:
            self.sums.setdefault(key, np.zeros(self.horizon))

    def update(self, futures, means, covs, probs) -> MultiModalAccumulator:
        """``futures`` (N, K, 2); mixture arrays as in the module docstring."""
        futures = np.asarray(futures, dtype=float)
        means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        n, m = means.shape[:2]
        _check_steps(futures, self.horizon)
        p = _mode_probs(probs, n, m)
        err = futures[:, None] - means
        dist = _distances(err)  # (N, M, K)
        sq = dist**2
        rows = np.arange(n)
        imax = np.argmax(p, axis=1)
        imin = np.argmin(dist[:, :, -1], axis=1)
        s = self.sums
        s["p_sq"] += np.einsum("nm,nmk->k", p, sq)
        s["p_dist"] += np.einsum("nm,nmk->k", p, dist)
        s["maxp_sq"] += sq[rows, imax].sum(axis=0)
        s["maxp_dist"] += dist[rows, imax].sum(axis=0)
        s["min_sq"] += sq[rows, imin].sum(axis=0)
        s["min_dist"] += dist[rows, imin].sum(axis=0)
        nll = nll_point(err[..., 0], err[..., 1], covs)  # (N, M, K)
        s["nll_mm"] += mixture_nll(np.moveaxis(nll, 1, -1), p[:, None, :]).sum(axis=0)
        s["miss_mm"] += np.sum(dist.min(axis=1) > self.threshold, axis=0)
        if m >= 2:
            sim = similarity(np.moveaxis(means, 1, 2), np.moveaxis(covs, 1, 2))  # (N, K)
            s["sim"] += sim.sum(axis=0)
            self.n_sim += n
        self.n += n
        return self

    def merge(self, other: MultiModalAccumulator) -> MultiModalAccumulator:
        sums = {k: self.sums[k] + other.sums[k] for k in self.KEYS}
        return MultiModalAccumulator(self.horizon, self.threshold, self.n + other.n, sums,
                                     self.n_sim + other.n_sim)

    __add__ = merge

    def result(self) -> MultiModalMetrics:
        if self.n == 0:
            raise DataError("no samples")
        s, n = self.sums, self.n
        sim = s["sim"] / self.n_sim if self.n_sim else None
        return MultiModalMetrics(
            np.sqrt(s["p_sq"] / n), np.sqrt(s["maxp_sq"] / n), np.sqrt(s["min_sq"] / n),
            s["p_dist"] / n, s["maxp_dist"] / n, s["min_dist"] / n,
            s["nll_mm"] / n, s["miss_mm"] / n, sim,
        )


def step_metrics(futures, means, covs, threshold: float = MISS_THRESHOLD) -> StepMetrics:
    futures = np.asarray(futures, dtype=float)
    acc = StepAccumulator(futures.shape[-2], threshold)
    return acc.update(futures, means, covs).result()


def multimodal_metrics(mixture, futures, threshold: float = MISS_THRESHOLD) -> MultiModalMetrics:
    """Evaluate a mixture prediction (``means``, ``covs``, ``probs``)."""
    futures = np.asarray(futures, dtype=float)
    acc = MultiModalAccumulator(futures.shape[-2], threshold)
    return acc.update(futures, mixture.means, mixture.covs, mixture.probs).result()


# --------------------------------------------------------------------------
# covariance calibration


@dataclass
class CovarianceAccumulator:
    horizon: int
    n: int = 0
    sum_e: np.ndarray = None
    sum_eet: np.ndarray = None
    sum_P: np.ndarray = None
    sum_abs: np.ndarray = None

    def __post_init__(self):
        k = self.horizon
        self.sum_e = np.zeros((k, 2)) if self.sum_e is None else self.sum_e
        self.sum_eet = np.zeros((k, 2, 2)) if self.sum_eet is None else self.sum_eet
        self.sum_P = np.zeros((k, 2, 2)) if self.sum_P is None else self.sum_P
        self.sum_abs = np.zeros((k, 2)) if self.sum_abs is None else self.sum_abs

    def update(self, futures, means, covs) -> CovarianceAccumulator:
        err = np.asarray(futures, dtype=float) - np.asarray(means, dtype=float)
        _check_steps(err, self.horizon)
        self.n += err.shape[0]
        self.sum_e += err.sum(axis=0)
        self.sum_eet += np.einsum("nki,nkj->kij", err, err)
        self.sum_P += np.asarray(covs, dtype=float).sum(axis=0)
        self.sum_abs += np.abs(err).sum(axis=0)
        return self

    def merge(self, other: CovarianceAccumulator) -> CovarianceAccumulator:
        return CovarianceAccumulator(self.horizon, self.n + other.n, self.sum_e + other.sum_e,
                                     self.sum_eet + other.sum_eet, self.sum_P + other.sum_P,
                                     self.sum_abs + other.sum_abs)

    __add__ = merge

    def result(self, dt: float = 0.2, seconds=REPORT_SECONDS, level: float = 1.0) -> CovarianceReport:
        if self.n < 2:
            raise DataError("covariance report needs at least 2 samples")
        n = self.n
        mean_e = self.sum_e / n
        emp = (self.sum_eet - n * np.einsum("ki,kj->kij", mean_e, mean_e)) / (n - 1)
        pred = self.sum_P / n
        rmse_k = np.sqrt(np.trace(self.sum_eet, axis1=1, axis2=2) / n)
        steps = [int(round(t / dt)) for t in seconds]
        if max(steps) > self.horizon:
            raise DataError(f"report horizon {max(seconds)} s exceeds the {self.horizon}-step prediction")
        idx = [s - 1 for s in steps]
        return CovarianceReport(
            seconds=list(seconds), dt=dt, level=level,
            empirical=emp[idx], predicted=pred[idx], bias=mean_e, rmse=rmse_k,
            fde_curve=self.sum_abs / n, n=n,
        )


@dataclass
class CovarianceReport:
    """Empirical error covariance vs mean predicted covariance at a few
    horizons, plus per-step bias, RMSE and the per-axis mean absolute error
    curve ``(FDE_x(t), FDE_y(t))``."""

    seconds: list
    dt: float
    level: float
    empirical: np.ndarray
    predicted: np.ndarray
    bias: np.ndarray
    rmse: np.ndarray
    fde_curve: np.ndarray
    n: int

    @property
    def frobenius_ratio(self) -> np.ndarray:
        diff = np.linalg.norm(self.empirical - self.predicted, axis=(1, 2))
        return diff / np.linalg.norm(self.empirical, axis=(1, 2))

    @property
    def bias_ratio(self) -> np.ndarray:
        """Per-step ``|bias| / RMSE``."""
        return np.linalg.norm(self.bias, axis=1) / self.rmse

    def ellipses(self):
        out = []
        for t, emp, pred in zip(self.seconds, self.empirical, self.predicted):
            out.append({
                "t": t,
                "empirical": dict(zip(("major", "minor", "angle"), ellipse_params(emp, self.level))),
                "predicted": dict(zip(("major", "minor", "angle"), ellipse_params(pred, self.level))),
            })
        return out

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n,
            "dt_s": self.dt,
            "ellipse_level_sigma": self.level,
            "seconds": self.seconds,
            "empirical_cov_m2": self.empirical.tolist(),
            "mean_predicted_cov_m2": self.predicted.tolist(),
            "frobenius_ratio": self.frobenius_ratio.tolist(),
            "bias_m": self.bias.tolist(),
            "rmse_m": self.rmse.tolist(),
            "bias_over_rmse": self.bias_ratio.tolist(),
            "fde_curve_m": self.fde_curve.tolist(),
            "ellipses": self.ellipses(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CovarianceReport:
        return cls(d["seconds"], d["dt_s"], d["ellipse_level_sigma"],
                   np.asarray(d["empirical_cov_m2"]), np.asarray(d["mean_predicted_cov_m2"]),
                   np.asarray(d["bias_m"]), np.asarray(d["rmse_m"]), np.asarray(d["fde_curve_m"]),
                   d["n_samples"])


def covariance_report(futures, means, covs, dt: float = 0.2, level: float = 1.0) -> CovarianceReport:
    futures = np.asarray(futures, dtype=float)
    acc = CovarianceAccumulator(futures.shape[-2])
    return acc.update(futures, means, covs).result(dt=dt, level=level)
