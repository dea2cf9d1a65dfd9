"""Multi-modal constant-velocity prediction.

An exploration Gaussian over (heading perturbation theta, velocity factor
alpha_v), centered at (0, 1), is quantized with k-means. Each centroid turns
the filtered state at t0 into one constant-velocity mode; the Monte Carlo
mass of its Voronoi cell is the mode probability, and the within-cell spread
relative to the total spread shrinks the mode covariance.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .exceptions import ConfigError, DataError
from .kalman import (
    HORIZON, CvModel, CvParams, GaussianState, PredictedTrajectory, _check_history, as_tensor,
    filter_history, predict_horizon, process_noise,
)

EXPLORATION_MEAN = np.array([0.0, 1.0])


@dataclass(frozen=True)
class ExplorationSpec:
    sigma_theta: float = 0.0
    sigma_alpha: float = 0.1
    k: int = 6
    n_mc: int = 100_000
    seed: int = 0
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        if self.sigma_theta < 0 or self.sigma_alpha < 0:
            raise ConfigError("exploration stds must be non-negative")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.k > self.n_mc:
            raise ConfigError(f"k={self.k} exceeds n_mc={self.n_mc}")
        if self.n_mc < 10 * self.k:
            raise ConfigError(f"n_mc={self.n_mc} must be at least 10 k = {10 * self.k}")

    @property
    def cov(self) -> np.ndarray:
        return np.diag([self.sigma_theta**2, self.sigma_alpha**2])


@dataclass
class ModeSet:
    """Centroids (k, 2) as (theta rad, alpha_v), probabilities and
    covariance coefficients, sorted by alpha_v then theta."""

    centroids: np.ndarray
    probs: np.ndarray
    cov_coeffs: np.ndarray
    spec: ExplorationSpec | None = None

    def __len__(self):
        return len(self.probs)

    def to_dict(self) -> dict:
        return {
            "format": "kalmanbase.mode_set",
            "version": 1,
            "units": {"theta": "rad", "alpha_v": "velocity factor"},
            "centroids": np.asarray(self.centroids).tolist(),
            "probs": np.asarray(self.probs).tolist(),
            "cov_coeffs": np.asarray(self.cov_coeffs).tolist(),
            "spec": asdict(self.spec) if self.spec else None,
            "seed": self.spec.seed if self.spec else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModeSet:
        if d.get("format") != "kalmanbase.mode_set":
            raise DataError(f"not a mode set file (format={d.get('format')!r})")
        spec = ExplorationSpec(**d["spec"]) if d.get("spec") else None
        return cls(np.asarray(d["centroids"], float), np.asarray(d["probs"], float),
                   np.asarray(d["cov_coeffs"], float), spec)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        # all points coincide with chosen centers: any point will do
        i = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[i])
        d2 = np.minimum(d2, np.sum((X - X[i]) ** 2, axis=1))
    return np.array(centers)


def _assign(X, C):
    d2 = (np.sum(X**2, 1)[:, None] - 2 * X @ C.T + np.sum(C**2, 1)[None, :])
    return np.argmin(d2, axis=1), d2


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100, tol: float = 1e-8):
    """Lloyd iterations from k-means++ seeds.

    An empty cell is re-seeded at the point farthest from its assigned
    centroid (lowest index on ties).
    """
    C = _kmeans_pp(X, k, rng)
    labels, d2 = _assign(X, C)
    for _ in range(max_iter):
        new = C.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(len(X)), labels]))
                new[j] = X[far]
                labels[far] = j
        shift = np.max(np.linalg.norm(new - C, axis=1))
        C = new
        labels, d2 = _assign(X, C)
        if shift < tol:
            break
    return C, labels


def cell_coefficients(X: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """sqrt of the geometric mean, over non-degenerate axes, of
    within-cell variance / total variance."""
    total = X.var(axis=0)
    axes = total > 0
    coeffs = np.ones(k)
    if not axes.any():
        return coeffs
    for j in range(k):
        cell = X[labels == j]
        ratio = cell.var(axis=0)[axes] / total[axes]
        coeffs[j] = math.sqrt(float(np.exp(np.mean(np.log(ratio))))) if np.all(ratio > 0) else 0.0
    return coeffs


def quantize(spec: ExplorationSpec) -> ModeSet:
    if spec.k == 1:
        # the optimal single-point quantizer is the distribution mean itself
        return ModeSet(EXPLORATION_MEAN[None, :].copy(), np.ones(1), np.ones(1), spec)
    rng = np.random.default_rng(spec.seed)
    X = rng.standard_normal((spec.n_mc, 2)) * [spec.sigma_theta, spec.sigma_alpha] + EXPLORATION_MEAN
    C, labels = kmeans(X, spec.k, rng, spec.max_iter, spec.tol)
    probs = np.bincount(labels, minlength=spec.k) / spec.n_mc
    coeffs = cell_coefficients(X, labels, spec.k)
    order = np.lexsort((C[:, 0], C[:, 1]))
    probs = probs[order]
    return ModeSet(C[order], probs / probs.sum(), coeffs[order], spec)


def apply_mode(state: GaussianState, theta, alpha_v) -> GaussianState:
    """Rotate the velocity by ``theta`` and scale it by ``alpha_v``."""
    x = state.x_hat
    c, s = math.cos(theta), math.sin(theta)
    vx, vy = x[..., 1], x[..., 3]
    out = x.clone() if torch.is_tensor(x) else np.array(x, dtype=float)
    out[..., 1] = alpha_v * (c * vx - s * vy)
    out[..., 3] = alpha_v * (s * vx + c * vy)
    return GaussianState(out, state.P)


@dataclass
class MixturePrediction:
    """Gaussian mixture over trajectories: means (..., M, K, 2), covariances
    (..., M, K, 2, 2), probabilities (M,), coefficients (M,)."""

    means: np.ndarray
    covs: np.ndarray
    probs: np.ndarray
    cov_coeffs: np.ndarray

    @property
    def modes(self) -> list[PredictedTrajectory]:
        m = self.means.shape[-3]
        return [PredictedTrajectory(self.means[..., j, :, :], self.covs[..., j, :, :, :]) for j in range(m)]


def predict_multimodal_tensors(Z, params: CvParams, modes: ModeSet, model: CvModel,
                               horizon: int = HORIZON, cov_scale_power: int = 2):
    state0 = filter_history(Z, params, model)
    q = process_noise(model.E, params.q_factor)
    means, covs = [], []
    for (theta, alpha_v), coeff in zip(modes.centroids, modes.cov_coeffs):
        m, c, _ = predict_horizon(apply_mode(state0, float(theta), float(alpha_v)), model, q, horizon)
        means.append(m)
        covs.append(c if coeff == 1.0 else c * float(coeff) ** cov_scale_power)
    return torch.stack(means, dim=-3), torch.stack(covs, dim=-4)


def predict_multimodal(history, params: CvParams, modes: ModeSet, model: CvModel | None = None,
                       horizon: int = HORIZON, cov_scale_power: int = 2) -> MixturePrediction:
    """Filter once, then one constant-velocity prediction per mode.

    ``cov_scale_power`` 2 scales covariances by the squared coefficient (std
    scaled by the coefficient); 1 applies the coefficient to the covariance.
    """
    if cov_scale_power not in (1, 2):
        raise ConfigError("cov_scale_power must be 1 or 2")
    model = model or CvModel()
    Z = _check_history(history)
    with torch.no_grad():
        means, covs = predict_multimodal_tensors(Z, params, modes, model, horizon, cov_scale_power)
    return MixturePrediction(means.numpy(), covs.numpy(), np.asarray(modes.probs, float),
                             np.asarray(modes.cov_coeffs, float))


def exploration_samples(histories, futures, params: CvParams, model: CvModel | None = None) -> np.ndarray:
    """Per-sample (heading change rad, velocity factor) that maps the filtered
    velocity at t0 onto the observed displacement over the horizon."""
    model = model or CvModel()
    Z = _check_history(histories)
    F = np.asarray(futures, dtype=float)
    with torch.no_grad():
        x0 = filter_history(Z, params, model).x_hat.numpy()
    T = F.shape[-2] * model.dt
    pred = x0[..., [1, 3]] * T
    actual = F[..., -1, :] - x0[..., [0, 2]]
    theta = np.arctan2(actual[..., 1], actual[..., 0]) - np.arctan2(pred[..., 1], pred[..., 0])
    theta = (theta + np.pi) % (2 * np.pi) - np.pi
    speed = np.hypot(pred[..., 0], pred[..., 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(speed > 0, np.hypot(actual[..., 0], actual[..., 1]) / speed, np.nan)
    return np.stack([theta, alpha], axis=-1)
