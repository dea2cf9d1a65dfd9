"""Maximum-likelihood fitting of filter parameters.

Parameters are optimized in an unconstrained flat vector: covariance
factors are lower-triangular with softplus diagonals, every other entry is
free. The loss is the Gaussian negative log-likelihood of the observed future
averaged over samples and prediction steps; gradients come from reverse-mode
differentiation through the whole filter and prediction recursion.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data import DatasetSplit, SampleSet, split_by_vehicle
from .exceptions import ConfigError, DataError, NumericalError
from .kalman import DTYPE, HORIZON, CvModel, CvParams, as_tensor, rollout_tensors
from .rnn import CaModel, RnnParams, rollout_rnn_tensors, softplus, softplus_inv

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3
RHO_CAP = 0.999
LOG_2PI = math.log(2 * math.pi)


# --------------------------------------------------------------------------
# reparameterization


class ParamPacker:
    """Bijection between a flat unconstrained vector and a parameter bundle.

    ``layout`` lists ``(name, kind, shape)`` with kind one of ``free``,
    ``factor`` (lower-triangular, softplus diagonal) or ``spd`` (``L L^T`` of
    such a factor).
    """

    def __init__(self, layout, build, static=None):
        self.layout = list(layout)
        self.build = build
        self.static = static or {}
        self.slices = {}
        offset = 0
        for name, kind, shape in self.layout:
            n = shape[0] * (shape[0] + 1) // 2 if kind in ("factor", "spd") else math.prod(shape)
            self.slices[name] = slice(offset, offset + n)
            offset += n
        self.size = offset

    def names(self) -> list[str]:
        """Human-readable label for every flat coordinate."""
        labels = []
        for name, kind, shape in self.layout:
            n = self.slices[name].stop - self.slices[name].start
            labels += [f"{name}[{i}]" for i in range(n)]
        return labels

    def unpack(self, theta: torch.Tensor):
        values = {}
        for name, kind, shape in self.layout:
            v = theta[self.slices[name]]
            if kind == "free":
                values[name] = v.reshape(shape)
            else:
                L = _tril_from_flat(v, shape[0])
                values[name] = L @ L.T if kind == "spd" else L
        return self.build(**values, **self.static)

    def pack(self, params) -> torch.Tensor:
        parts = []
        for name, kind, shape in self.layout:
            M = getattr(params, name).detach()
            if kind == "free":
                parts.append(M.reshape(-1))
                continue
            if kind == "factor":
                M = M @ M.T
            parts.append(_flat_from_tril(_safe_cholesky(M)))
        return torch.cat(parts).to(DTYPE)


def _tril_from_flat(v: torch.Tensor, n: int) -> torch.Tensor:
    r, c = torch.tril_indices(n, n)
    raw = torch.zeros(n, n, dtype=v.dtype).index_put((r, c), v)
    d = torch.diagonal(raw)
    return raw - torch.diag(d) + torch.diag(softplus(d))


def _flat_from_tril(L: torch.Tensor) -> torch.Tensor:
    n = L.shape[0]
    r, c = torch.tril_indices(n, n)
    M = L.clone()
    idx = torch.arange(n)
    M[idx, idx] = softplus_inv(torch.clamp(torch.diagonal(L), min=1e-10))
    return M[r, c]


def _safe_cholesky(M: torch.Tensor) -> torch.Tensor:
    M = 0.5 * (M + M.T)
    L, info = torch.linalg.cholesky_ex(M)
    if int(info) == 0:
        return L
    jitter = 1e-20 + 1e-12 * float(torch.diagonal(M).abs().max())
    return torch.linalg.cholesky(M + jitter * torch.eye(M.shape[0], dtype=M.dtype))


def cv_packer() -> ParamPacker:
    return ParamPacker(
        [("q_factor", "factor", (2, 2)), ("r_obs", "spd", (2, 2)),
         ("init_state_bias", "free", (4,)), ("init_cov", "spd", (4, 4))],
        CvParams,
    )


def rnn_packer(params: RnnParams) -> ParamPacker:
    h = params.hidden_size
    return ParamPacker(
        [("q_factor", "factor", (2, 2)), ("r_obs", "spd", (2, 2)),
         ("init_state_bias", "free", (6,)), ("init_cov", "spd", (6, 6)),
         ("U", "free", (6, 4 * h)), ("W", "free", (h, 4 * h)), ("b", "free", (4 * h,)),
         ("head_W", "free", (h, 4)), ("head_b", "free", (4,))],
        RnnParams,
        static={"hidden_size": h, "input_scale": params.input_scale, "jerk_limit": params.jerk_limit},
    )


def packer_for(params) -> ParamPacker:
    if isinstance(params, CvParams):
        return cv_packer()
    if isinstance(params, RnnParams):
        return rnn_packer(params)
    raise TypeError(f"no packer for {type(params).__name__}")


# --------------------------------------------------------------------------
# loss


def gaussian_nll(d: torch.Tensor, cov: torch.Tensor):
    """Bivariate Gaussian NLL (nats) of errors ``d`` (..., 2) under ``cov``
    (..., 2, 2), with std floored and correlation capped.

    Returns ``(nll, floored)`` where ``floored`` marks entries the floors
    changed.
    """
    vx, vy = cov[..., 0, 0], cov[..., 1, 1]
    floor2 = SIGMA_FLOOR**2
    sx = torch.sqrt(torch.clamp(vx, min=floor2))
    sy = torch.sqrt(torch.clamp(vy, min=floor2))
    rho_raw = cov[..., 0, 1] / (sx * sy)
    rho = torch.clamp(rho_raw, -RHO_CAP, RHO_CAP)
    floored = (vx < floor2) | (vy < floor2) | (rho_raw.abs() > RHO_CAP)
    dx, dy = d[..., 0], d[..., 1]
    one_m_rho2 = 1 - rho**2
    quad = (dx**2 / sx**2 + dy**2 / sy**2 - 2 * rho * dx * dy / (sx * sy)) / one_m_rho2
    nll = 0.5 * quad + torch.log(sx * sy * torch.sqrt(one_m_rho2)) + LOG_2PI
    return nll, floored


def predict_tensors(params, Z: torch.Tensor, horizon: int = HORIZON, dt: float = 0.2):
    if isinstance(params, CvParams):
        means, covs, _ = rollout_tensors(Z, params, CvModel(dt), horizon)
    elif isinstance(params, RnnParams):
        means, covs, _ = rollout_rnn_tensors(Z, params, CaModel(dt), horizon)
    else:
        raise TypeError(f"unknown parameter type {type(params).__name__}")
    return means, covs


def _check_predictor(params, predictor):
    expected = {"cv": CvParams, "rnn": RnnParams}
    if predictor is not None and not isinstance(params, expected.get(predictor, ())):
        raise ConfigError(f"predictor {predictor!r} does not match {type(params).__name__}")


def batch_loss(params, histories, futures, dt: float = 0.2):
    """Differentiable mean NLL plus the number of floored entries."""
    Z = as_tensor(histories)
    F = as_tensor(futures)
    if Z.shape[0] == 0:
        raise DataError("loss needs a non-empty batch")
    means, covs = predict_tensors(params, Z, F.shape[-2], dt)
    nll, floored = gaussian_nll(F - means, covs)
    return nll.mean(), int(floored.sum())


def loss(params, batch: SampleSet, predictor: str | None = None) -> float:
    """Mean over samples and steps of the per-step Gaussian NLL."""
    _check_predictor(params, predictor)
    with torch.no_grad():
        value, n_floored = batch_loss(params, batch.histories, batch.futures)
    if n_floored:
        log.warning("loss evaluated with %d floored covariance entries", n_floored)
    return float(value)


def _theta_loss(packer, theta, batch: SampleSet):
    return batch_loss(packer.unpack(theta), batch.histories, batch.futures)[0]


def gradient(params, batch: SampleSet, predictor: str | None = None) -> np.ndarray:
    """Exact gradient of ``loss`` w.r.t. the unconstrained flat vector."""
    _check_predictor(params, predictor)
    packer = packer_for(params)
    theta = packer.pack(params).requires_grad_(True)
    (g,) = torch.autograd.grad(_theta_loss(packer, theta, batch), theta)
    bad = torch.nonzero(~torch.isfinite(g))
    if len(bad):
        i = int(bad[0, 0])
        raise NumericalError(f"non-finite gradient at parameter {i} ({packer.names()[i]})")
    return g.numpy()


def finite_difference_gradient(params, batch: SampleSet, step: float = 1e-5, indices=None,
                               chunk: int = 128) -> np.ndarray:
    """Central differences of ``loss`` along the selected flat coordinates.

    For recurrent parameters the LSTM and head weights are perturbed
    ``chunk`` coordinates at a time as an ensemble of weight sets evaluated
    in one batched forward pass.
    """
    packer = packer_for(params)
    theta = packer.pack(params)
    indices = list(range(packer.size)) if indices is None else [int(i) for i in indices]
    out = np.zeros(packer.size)
    ensemble = [i for i in indices if _is_weight(packer, i)] if isinstance(params, RnnParams) else []
    single = sorted(set(indices) - set(ensemble))
    with torch.no_grad():
        for i in single:
            e = torch.zeros_like(theta)
            e[i] = step
            hi = float(_theta_loss(packer, theta + e, batch))
            lo = float(_theta_loss(packer, theta - e, batch))
            out[i] = (hi - lo) / (2 * step)
        for start in range(0, len(ensemble), chunk):
            idx = torch.as_tensor(ensemble[start:start + chunk])
            m = len(idx)
            thetas = theta.repeat(2 * m, 1)
            thetas[torch.arange(m), idx] += step
            thetas[torch.arange(m, 2 * m), idx] -= step
            losses = _ensemble_loss(packer, theta, thetas, batch)
            out[idx.numpy()] = ((losses[:m] - losses[m:]) / (2 * step)).numpy()
    return out


RNN_WEIGHTS = ("U", "W", "b", "head_W", "head_b")


def _is_weight(packer, i):
    return any(packer.slices[n].start <= i < packer.slices[n].stop for n in RNN_WEIGHTS)


def _ensemble_loss(packer, theta, thetas, batch: SampleSet) -> torch.Tensor:
    """Per-row mean NLL for weight vectors ``thetas`` (E, P) that differ
    from ``theta`` only in LSTM/head coordinates."""
    base = packer.unpack(theta)
    e = thetas.shape[0]
    shapes = {name: shape for name, _, shape in packer.layout}
    weights = {}
    for name in RNN_WEIGHTS:
        w = thetas[:, packer.slices[name]].reshape(e, *shapes[name])
        weights[name] = w.unsqueeze(1) if w.ndim == 2 else w
    ens = RnnParams(base.hidden_size, base.q_factor, base.r_obs, base.init_state_bias, base.init_cov,
                    **weights, input_scale=base.input_scale, jerk_limit=base.jerk_limit)
    Z = as_tensor(batch.histories).expand(e, *batch.histories.shape)
    F = as_tensor(batch.futures)
    means, covs, _ = rollout_rnn_tensors(Z, ens, CaModel(), F.shape[-2])
    nll, _ = gaussian_nll(F - means, covs)
    return nll.mean(dim=(1, 2))


# --------------------------------------------------------------------------
# fitting


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    clip_norm: float = 10.0
    val_fraction: float = 0.1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate <= 0 or self.eps <= 0 or self.clip_norm <= 0:
            raise ConfigError("learning_rate, eps and clip_norm must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be at least 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def initial_cv_params(train: SampleSet, dt: float = 0.2) -> CvParams:
    """Start from the spread of finite-difference velocities over the history."""
    H = train.histories
    v = (H[:, -1] - H[:, 0]) / ((H.shape[1] - 1) * dt)
    mean, var = v.mean(0), v.var(0) + 1.0
    return CvParams(
        q_factor=np.eye(2),
        r_obs=np.eye(2),
        init_state_bias=[0.0, mean[0], 0.0, mean[1]],
        init_cov=np.diag([1.0, var[0], 1.0, var[1]]),
    )


def initial_rnn_params(train: SampleSet, hidden_size: int = 32, seed: int = 0, dt: float = 0.2) -> RnnParams:
    cv = initial_cv_params(train, dt)
    b4, c4 = cv.init_state_bias, torch.diagonal(cv.init_cov)
    return RnnParams.initialize(
        hidden_size, seed,
        init_state_bias=[b4[0], b4[1], 0.0, b4[2], b4[3], 0.0],
        init_cov=torch.diag(as_tensor([c4[0], c4[1], 1.0, c4[2], c4[3], 1.0])),
    )


class TrainingDiverged(NumericalError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


def fit(dataset: DatasetSplit | SampleSet, config: TrainConfig | None = None, predictor: str = "cv",
        init_params=None, hidden_size: int = 32, callback=None, dt: float = 0.2):
    """Minimize the time-averaged NLL with mini-batch Adam.

    Returns ``(best_params, log_records, optimizer_state)``; ``best_params``
    has the lowest validation loss seen at the end of any epoch.
    """
    config = config or TrainConfig()
    samples = dataset.train if isinstance(dataset, DatasetSplit) else dataset
    if len(samples) == 0:
        raise DataError("no training samples")
    if predictor not in ("cv", "rnn"):
        raise ConfigError(f"unknown predictor {predictor!r}")
    train, val = split_by_vehicle(samples, config.val_fraction, config.seed)
    if len(train) == 0:
        train, val = samples, SampleSet.empty()
    if init_params is None:
        init_params = (initial_cv_params(train, dt) if predictor == "cv"
                       else initial_rnn_params(train, hidden_size, config.seed, dt))
    _check_predictor(init_params, predictor)
    packer = packer_for(init_params)
    theta = packer.pack(init_params).clone().requires_grad_(True)
    opt = torch.optim.Adam([theta], lr=config.learning_rate, betas=config.betas, eps=config.eps)
    gen = torch.Generator().manual_seed(config.seed)
    monitor = val if len(val) else train

    def evaluate(th):
        with torch.no_grad():
            return _chunked_loss(packer.unpack(th), monitor, dt=dt)

    best_val = evaluate(theta.detach())
    best_theta = theta.detach().clone()
    records = [{"epoch": 0, "train_loss": None, "val_loss": best_val}]
    n = len(train)
    for epoch in range(1, config.epochs + 1):
        perm = torch.randperm(n, generator=gen).numpy()
        total, floored = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            opt.zero_grad()
            value, nf = batch_loss(packer.unpack(theta), train.histories[idx], train.futures[idx], dt)
            if not torch.isfinite(value):
                raise TrainingDiverged(f"loss became {float(value)} in epoch {epoch}",
                                       packer.unpack(best_theta))
            value.backward()
            bad = torch.nonzero(~torch.isfinite(theta.grad))
            if len(bad):
                i = int(bad[0, 0])
                raise TrainingDiverged(f"non-finite gradient at parameter {i} ({packer.names()[i]})",
                                       packer.unpack(best_theta))
            torch.nn.utils.clip_grad_norm_([theta], config.clip_norm)
            opt.step()
            total += float(value.detach()) * len(idx)
            floored += nf
        val_loss = evaluate(theta.detach())
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"validation loss became {val_loss} in epoch {epoch}",
                                   packer.unpack(best_theta))
        rec = {"epoch": epoch, "train_loss": total / n, "val_loss": val_loss, "floored": floored}
        records.append(rec)
        log.info("epoch %d train %.5f val %.5f", epoch, rec["train_loss"], val_loss)
        if val_loss < best_val:
            best_val, best_theta = val_loss, theta.detach().clone()
        if callback is not None:
            callback(rec)
    opt_state = _optimizer_state(opt)
    return packer.unpack(best_theta).detach(), records, opt_state


def _chunked_loss(params, samples: SampleSet, chunk: int = 4096, dt: float = 0.2) -> float:
    total = 0.0
    for start in range(0, len(samples), chunk):
        sl = slice(start, start + chunk)
        value, _ = batch_loss(params, samples.histories[sl], samples.futures[sl], dt)
        total += float(value) * len(samples.histories[sl])
    return total / len(samples)


def _optimizer_state(opt: torch.optim.Optimizer) -> dict:
    sd = copy.deepcopy(opt.state_dict())
    state = {}
    for k, v in sd["state"].items():
        state[str(k)] = {n: (t.tolist() if torch.is_tensor(t) else t) for n, t in v.items()}
    return {"state": state, "param_groups": sd["param_groups"]}
