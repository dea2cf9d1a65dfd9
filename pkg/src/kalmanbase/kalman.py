"""Linear constant-velocity Kalman filter and the filter-then-predict rollout.

State layout is ``(x, v_x, y, v_y)``; observations are positions ``(x, y)``.
All recursions work on torch float64 tensors with arbitrary leading batch
dimensions so the same code serves evaluation and gradient-based fitting.
States are row vectors, matrices act on the trailing axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch

from .exceptions import DataError, NumericalError

DTYPE = torch.float64
HISTORY_LEN = 15
HORIZON = 25
DT = 0.2


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def matvec(M: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Batched ``M @ v`` for row-stored vectors."""
    if M.ndim == 2:
        return v @ M.mT
    return (M @ v.unsqueeze(-1)).squeeze(-1)


def per_axis(block: torch.Tensor) -> torch.Tensor:
    """Repeat a one-axis block on the diagonal for the x and y axes."""
    return torch.block_diag(block, block)


def position_selector(n_per_axis: int) -> torch.Tensor:
    H = torch.zeros(2, 2 * n_per_axis, dtype=DTYPE)
    H[0, 0] = 1.0
    H[1, n_per_axis] = 1.0
    return H


@dataclass(frozen=True)
class CvModel:
    """Constant-velocity model matrices for a fixed timestep (seconds)."""

    dt: float = DT

    @cached_property
    def A(self) -> torch.Tensor:
        return per_axis(as_tensor([[1.0, self.dt], [0.0, 1.0]]))

    @cached_property
    def E(self) -> torch.Tensor:
        return per_axis(as_tensor([[self.dt**2 / 2], [self.dt]]))

    @cached_property
    def H(self) -> torch.Tensor:
        return position_selector(2)

    @property
    def state_dim(self) -> int:
        return 4


@dataclass
class GaussianState:
    x_hat: torch.Tensor
    P: torch.Tensor

    def numpy(self) -> GaussianState:
        return GaussianState(self.x_hat.detach().numpy(), self.P.detach().numpy())


@dataclass
class PredictedTrajectory:
    """Predicted positions ``z_hat`` (..., H, 2) in meters and their 2x2
    error covariances ``cov`` (..., H, 2, 2) in square meters."""

    z_hat: np.ndarray
    cov: np.ndarray

    def __len__(self) -> int:
        return self.z_hat.shape[-2]


@dataclass
class CvParams:
    """Trainable parameters of the constant-velocity filter.

    ``q_factor`` is the lower-triangular acceleration-noise factor (m/s^2),
    so the per-step process noise is ``E q q^T E^T``. ``r_obs`` (m^2) is the
    observation noise. The initial state is seeded from the first history
    point with zero velocity, then shifted by ``init_state_bias`` and given
    covariance ``init_cov``.
    """

    q_factor: torch.Tensor = field(default_factory=lambda: torch.eye(2, dtype=DTYPE))
    r_obs: torch.Tensor = field(default_factory=lambda: torch.eye(2, dtype=DTYPE))
    init_state_bias: torch.Tensor = field(default_factory=lambda: torch.zeros(4, dtype=DTYPE))
    init_cov: torch.Tensor = field(
        default_factory=lambda: torch.diag(as_tensor([1.0, 100.0, 1.0, 100.0]))
    )

    def __post_init__(self):
        self.q_factor = as_tensor(self.q_factor)
        self.r_obs = as_tensor(self.r_obs)
        self.init_state_bias = as_tensor(self.init_state_bias)
        self.init_cov = as_tensor(self.init_cov)
        if self.q_factor.shape != (2, 2) or self.r_obs.shape != (2, 2):
            raise ValueError("q_factor and r_obs must be 2x2")
        n = self.init_state_bias.shape[0]
        if self.init_cov.shape != (n, n):
            raise ValueError("init_cov must match init_state_bias")

    @property
    def process_cov(self) -> torch.Tensor:
        """Acceleration noise covariance ``Q_a Q_a^T`` in (m/s^2)^2."""
        return self.q_factor @ self.q_factor.T

    def detach(self) -> CvParams:
        return CvParams(*(t.detach().clone() for t in self._tensors()))

    def _tensors(self):
        return (self.q_factor, self.r_obs, self.init_state_bias, self.init_cov)

    def to_dict(self) -> dict:
        return {
            "format": "kalmanbase.cv_params",
            "version": 1,
            "units": {
                "q_factor": "m/s^2",
                "r_obs": "m^2",
                "init_state_bias": "m, m/s, m, m/s",
                "init_cov": "SI squared, state order (x, v_x, y, v_y)",
            },
            "q_factor": self.q_factor.detach().tolist(),
            "r_obs": self.r_obs.detach().tolist(),
            "init_state_bias": self.init_state_bias.detach().tolist(),
            "init_cov": self.init_cov.detach().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CvParams:
        if d.get("format") != "kalmanbase.cv_params":
            raise DataError(f"not a CV parameter file (format={d.get('format')!r})")
        return cls(d["q_factor"], d["r_obs"], d["init_state_bias"], d["init_cov"])


def process_noise(E: torch.Tensor, q_factor: torch.Tensor) -> torch.Tensor:
    """``Q = E Q_a Q_a^T E^T``."""
    G = E @ q_factor
    return G @ G.mT


def predict_step(state: GaussianState, model, q: torch.Tensor) -> GaussianState:
    A = model.A
    return GaussianState(matvec(A, state.x_hat), A @ state.P @ A.mT + q)


def innovate(obs, state: GaussianState, model, r: torch.Tensor):
    """Return ``(residual, S)``."""
    H = model.H
    residual = as_tensor(obs) - matvec(H, state.x_hat)
    S = H @ state.P @ H.mT + r
    return residual, S


def inv2x2(S: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Closed-form inverse of (batched) 2x2 matrices; also returns det."""
    det = S[..., 0, 0] * S[..., 1, 1] - S[..., 0, 1] * S[..., 1, 0]
    tr = S[..., 0, 0] + S[..., 1, 1]
    adj = tr[..., None, None] * torch.eye(2, dtype=S.dtype) - S
    return adj / det[..., None, None], det


def _check_invertible(S: torch.Tensor, det: torch.Tensor) -> None:
    tr = S[..., 0, 0] + S[..., 1, 1]
    ok = torch.isfinite(det) & (det > 1e-14 * tr.square())
    if bool(ok.all()):
        return
    with torch.no_grad():
        Sd = S.detach().reshape(-1, 2, 2)
        bad = (~ok).reshape(-1).nonzero()[0, 0]
        eig = torch.linalg.eigvalsh(0.5 * (Sd[bad] + Sd[bad].mT))
        cond = float(eig[-1] / eig[0]) if eig[0] > 0 else float("inf")
    raise NumericalError(
        f"innovation covariance is singular: det={float(det.reshape(-1)[bad]):.3e}, "
        f"eigenvalues={eig.tolist()}, condition number={cond:.3e}"
    )


def update(state: GaussianState, residual, S: torch.Tensor, model) -> GaussianState:
    H = model.H
    S_inv, det = inv2x2(S)
    _check_invertible(S, det)
    K = state.P @ H.mT @ S_inv
    x_new = state.x_hat + matvec(K, residual)
    P_new = state.P - K @ H @ state.P
    return GaussianState(x_new, 0.5 * (P_new + P_new.mT))


def seed_state(first_obs: torch.Tensor, n_per_axis: int) -> torch.Tensor:
    """Positions from the first observation, all derivatives zero."""
    x = torch.zeros(*first_obs.shape[:-1], 2 * n_per_axis, dtype=DTYPE)
    x[..., 0] = first_obs[..., 0]
    x[..., n_per_axis] = first_obs[..., 1]
    return x


def filter_history(Z: torch.Tensor, params: CvParams, model: CvModel) -> GaussianState:
    """Run predict/innovate/update over every history observation (..., T, 2).

    The covariance recursion does not depend on the data, so ``P`` carries no
    batch dimension unless the parameters do.
    """
    q = process_noise(model.E, params.q_factor)
    x0 = seed_state(Z[..., 0, :], model.state_dim // 2) + params.init_state_bias
    state = GaussianState(x0, params.init_cov)
    for k in range(Z.shape[-2]):
        state = predict_step(state, model, q)
        residual, S = innovate(Z[..., k, :], state, model, params.r_obs)
        state = update(state, residual, S, model)
    return state


def predict_horizon(state: GaussianState, model, q: torch.Tensor, horizon: int):
    """Predict-only propagation; returns ``(means, covs, final_state)``."""
    H = model.H
    means, covs = [], []
    for _ in range(horizon):
        state = predict_step(state, model, q)
        means.append(matvec(H, state.x_hat))
        covs.append(H @ state.P @ H.mT)
    batch = state.x_hat.shape[:-1]
    means = torch.stack(means, dim=-2)
    covs = torch.stack([c.expand(*batch, 2, 2) for c in covs], dim=-3)
    return means, covs, state


def rollout_tensors(Z: torch.Tensor, params: CvParams, model: CvModel, horizon: int = HORIZON):
    state0 = filter_history(Z, params, model)
    q = process_noise(model.E, params.q_factor)
    return predict_horizon(state0, model, q, horizon)


def _check_history(history) -> torch.Tensor:
    Z = as_tensor(history)
    if Z.ndim < 2 or Z.shape[-1] != 2:
        raise DataError(f"history must have shape (..., T, 2), got {tuple(Z.shape)}")
    if not bool(torch.isfinite(Z).all()):
        raise DataError("history contains non-finite values")
    return Z


def rollout(history, params: CvParams, model: CvModel | None = None, horizon: int = HORIZON):
    """Filter the history, then predict ``horizon`` steps ahead.

    ``history`` is (15, 2) or batched (N, 15, 2). Returns the
    ``PredictedTrajectory`` and the final predicted ``GaussianState``.
    """
    model = model or CvModel()
    Z = _check_history(history)
    with torch.no_grad():
        means, covs, final = rollout_tensors(Z, params, model, horizon)
    return PredictedTrajectory(means.numpy(), covs.numpy()), final.numpy()
