"""Kalman filter on a (position, velocity, acceleration) state whose
prediction step adds a jerk command produced by an LSTM cell.

During the filtering phase the cell runs on every posterior state to warm its
memory, but the commands are not applied and a learned base jerk noise keeps
the filter stable. During prediction the command and its std drive both the
mean and the covariance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch

from .exceptions import DataError
from .kalman import (
    DT, DTYPE, HORIZON, GaussianState, PredictedTrajectory, _check_history, as_tensor,
    innovate, matvec, per_axis, position_selector, process_noise, seed_state, update,
)

COMMAND_EPS = 1e-4
JERK_LIMIT = 20.0
# positions, velocities, accelerations are divided by roughly their scale
DEFAULT_INPUT_SCALE = (0.02, 0.05, 0.5, 0.02, 0.05, 0.5)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return torch.logaddexp(x, torch.zeros_like(x))


def softplus_inv(y):
    y = as_tensor(y)
    return y + torch.log(-torch.expm1(-y))


@dataclass(frozen=True)
class CaModel:
    """Constant-acceleration model; the command and noise matrices coincide."""

    dt: float = DT

    @cached_property
    def A(self) -> torch.Tensor:
        dt = self.dt
        return per_axis(as_tensor([[1.0, dt, dt**2 / 2], [0.0, 1.0, dt], [0.0, 0.0, 1.0]]))

    @cached_property
    def B(self) -> torch.Tensor:
        dt = self.dt
        return per_axis(as_tensor([[dt**3 / 6], [dt**2 / 2], [dt]]))

    @property
    def E(self) -> torch.Tensor:
        return self.B

    @cached_property
    def H(self) -> torch.Tensor:
        return position_selector(3)

    @property
    def state_dim(self) -> int:
        return 6


def _zeros(*shape):
    return torch.zeros(*shape, dtype=DTYPE)


@dataclass
class RnnParams:
    """Filter parameters of the 6-D model plus LSTM and output-head weights.

    Gate blocks in ``U`` (n_in, 4h), ``W`` (h, 4h) and ``b`` (4h) are ordered
    input, forget, cell, output. ``head_W`` (h, 4) and ``head_b`` (4) map the
    hidden state to (jerk command x/y, raw std x/y).

    The LSTM and head weights may carry leading dimensions (an ensemble of
    weight sets) that broadcast against the sample batch: matrices as
    (E, n, m) and vectors as (E, 1, n) for histories shaped (E, N, T, 2).
    """

    hidden_size: int = 32
    q_factor: torch.Tensor = None
    r_obs: torch.Tensor = None
    init_state_bias: torch.Tensor = None
    init_cov: torch.Tensor = None
    U: torch.Tensor = None
    W: torch.Tensor = None
    b: torch.Tensor = None
    head_W: torch.Tensor = None
    head_b: torch.Tensor = None
    input_scale: tuple = DEFAULT_INPUT_SCALE
    jerk_limit: float = JERK_LIMIT

    def __post_init__(self):
        h = self.hidden_size
        defaults = {
            "q_factor": torch.eye(2, dtype=DTYPE),
            "r_obs": torch.eye(2, dtype=DTYPE),
            "init_state_bias": _zeros(6),
            "init_cov": torch.diag(as_tensor([1.0, 100.0, 1.0, 1.0, 100.0, 1.0])),
            "U": _zeros(6, 4 * h),
            "W": _zeros(h, 4 * h),
            "b": _zeros(4 * h),
            "head_W": _zeros(h, 4),
            "head_b": torch.cat([_zeros(2), softplus_inv([1.0, 1.0])]),
        }
        for name, default in defaults.items():
            value = getattr(self, name)
            setattr(self, name, default if value is None else as_tensor(value))
            if getattr(self, name).shape[-default.ndim:] != default.shape:
                raise ValueError(f"{name} has shape {tuple(getattr(self, name).shape)}, "
                                 f"expected {tuple(default.shape)}")
        self.input_scale = tuple(float(v) for v in self.input_scale)

    @classmethod
    def initialize(cls, hidden_size: int = 32, seed: int = 0, **kwargs) -> RnnParams:
        """Uniform(-1/sqrt(h), 1/sqrt(h)) LSTM weights and a zero output head,
        so the untrained model is a constant-acceleration Kalman filter."""
        g = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(hidden_size)

        def uniform(*shape):
            return (torch.rand(*shape, generator=g, dtype=DTYPE) * 2 - 1) * bound

        return cls(hidden_size, U=uniform(6, 4 * hidden_size),
                   W=uniform(hidden_size, 4 * hidden_size), b=uniform(4 * hidden_size), **kwargs)

    TENSORS = ("q_factor", "r_obs", "init_state_bias", "init_cov", "U", "W", "b", "head_W", "head_b")

    def detach(self) -> RnnParams:
        return RnnParams(self.hidden_size, *(getattr(self, n).detach().clone() for n in self.TENSORS),
                         input_scale=self.input_scale, jerk_limit=self.jerk_limit)

    def to_dict(self) -> dict:
        return {
            "format": "kalmanbase.rnn_params",
            "version": 1,
            "hidden_size": self.hidden_size,
            "input_scale": list(self.input_scale),
            "jerk_limit": self.jerk_limit,
            "units": {"q_factor": "m/s^3", "r_obs": "m^2",
                      "init_state_bias": "m, m/s, m/s^2 per axis",
                      "commands": "m/s^3"},
            "shapes": {n: list(getattr(self, n).shape) for n in self.TENSORS},
            **{n: getattr(self, n).detach().tolist() for n in self.TENSORS},
        }

    @classmethod
    def from_dict(cls, d: dict) -> RnnParams:
        if d.get("format") != "kalmanbase.rnn_params":
            raise DataError(f"not an RNN parameter file (format={d.get('format')!r})")
        if d.get("version") != 1:
            raise DataError(f"unsupported RNN parameter version {d.get('version')}")
        return cls(d["hidden_size"], *(d[n] for n in cls.TENSORS),
                   input_scale=d["input_scale"], jerk_limit=d["jerk_limit"])


@dataclass
class RnnState:
    h: torch.Tensor
    c: torch.Tensor

    @classmethod
    def zeros(cls, batch_shape, hidden_size: int) -> RnnState:
        return cls(_zeros(*batch_shape, hidden_size), _zeros(*batch_shape, hidden_size))


def lstm_cell(x, h_prev, c_prev, params: RnnParams):
    """One LSTM step with row-vector weights: ``gate = x U + h W + b``."""
    z = x @ params.U + h_prev @ params.W + params.b
    zi, zf, zg, zo = z.chunk(4, dim=-1)
    i = torch.sigmoid(zi)
    f = torch.sigmoid(zf)
    g = torch.tanh(zg)
    o = torch.sigmoid(zo)
    c = f * c_prev + i * g
    h = o * torch.tanh(c)
    return h, c


def command_head(h: torch.Tensor, params: RnnParams):
    """Map the hidden state to (jerk command, command std), both (..., 2)."""
    raw = h @ params.head_W + params.head_b
    lim = params.jerk_limit
    u = lim * torch.tanh(raw[..., :2] / lim)
    q = softplus(raw[..., 2:]) + COMMAND_EPS
    return u, q


def cell_input(x_hat: torch.Tensor, ref: torch.Tensor, params: RnnParams) -> torch.Tensor:
    """Scaled state relative to the reference position (the ``t0`` point)."""
    return (x_hat - ref @ position_selector(3)) * as_tensor(params.input_scale)


def predict_step_cmd(state: GaussianState, rnn: RnnState, model: CaModel, params: RnnParams,
                     apply_command: bool, ref=None):
    """Advance the recurrent cell on the posterior state, then predict.

    Without ``apply_command`` this is a plain predict with the learned base
    jerk noise; the recurrent state still advances.
    """
    if ref is None:
        ref = torch.zeros(*state.x_hat.shape[:-1], 2, dtype=DTYPE)
    return _advance(state, rnn, model, params, apply_command, ref @ model.H,
                    as_tensor(params.input_scale), process_noise(model.E, params.q_factor))


def _advance(state, rnn, model, params, apply_command, offset, scale, base_q):
    h, c = lstm_cell((state.x_hat - offset) * scale, rnn.h, rnn.c, params)
    A, B = model.A, model.B
    x_pred = matvec(A, state.x_hat)
    P_pred = A @ state.P @ A.mT
    if apply_command:
        u, q = command_head(h, params)
        x_pred = x_pred + matvec(B, u)
        G = B * q.unsqueeze(-2)
        P_pred = P_pred + G @ G.mT
    else:
        P_pred = P_pred + base_q
    return GaussianState(x_pred, P_pred), RnnState(h, c)


def rollout_rnn_tensors(Z: torch.Tensor, params: RnnParams, model: CaModel, horizon: int = HORIZON):
    batch = Z.shape[:-2]
    H = model.H
    offset = Z[..., -1, :] @ H
    scale = as_tensor(params.input_scale)
    base_q = process_noise(model.E, params.q_factor)
    state = GaussianState(seed_state(Z[..., 0, :], 3) + params.init_state_bias, params.init_cov)
    rnn = RnnState.zeros(batch, params.hidden_size)
    for k in range(Z.shape[-2]):
        state, rnn = _advance(state, rnn, model, params, False, offset, scale, base_q)
        residual, S = innovate(Z[..., k, :], state, model, params.r_obs)
        state = update(state, residual, S, model)
    means, covs = [], []
    for _ in range(horizon):
        state, rnn = _advance(state, rnn, model, params, True, offset, scale, base_q)
        means.append(matvec(H, state.x_hat))
        covs.append(H @ state.P @ H.mT)
    return torch.stack(means, dim=-2), torch.stack(covs, dim=-3), state


def rollout_rnn(history, params: RnnParams, model: CaModel | None = None,
                horizon: int = HORIZON) -> PredictedTrajectory:
    model = model or CaModel()
    Z = _check_history(history)
    with torch.no_grad():
        means, covs, _ = rollout_rnn_tensors(Z, params, model, horizon)
    return PredictedTrajectory(means.numpy(), covs.numpy())


def ca_params_from(params: RnnParams):
    """The base filter parameters as a 6-D ``CvParams``-style bundle."""
    from .kalman import CvParams

    return CvParams(params.q_factor, params.r_obs, params.init_state_bias, params.init_cov)
