"""Chunked evaluation of a predictor over a test set.

The test set is cut into fixed-size chunks regardless of the worker count,
chunks are scored in a thread pool, and the accumulators are merged in chunk
order. Results therefore do not depend on ``workers``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .data import SampleSet
from .exceptions import ConfigError, DataError
from .kalman import CvModel, CvParams, rollout
from .metrics import (
    CovarianceAccumulator, CovarianceReport, MultiModalAccumulator, MultiModalMetrics,
    StepAccumulator, StepMetrics,
)
from .multimodal import ModeSet, predict_multimodal
from .rnn import CaModel, RnnParams, rollout_rnn

CHUNK = 2048


@dataclass
class EvalResult:
    steps: StepMetrics
    covariance: CovarianceReport
    multimodal: MultiModalMetrics | None
    n_samples: int
    dt: float


def predict_chunk(params, histories, horizon, dt, modes: ModeSet | None = None, cov_scale_power=2):
    """Returns (means (N, M, K, 2), covs (N, M, K, 2, 2), probs (M,))."""
    if isinstance(params, RnnParams):
        if modes is not None:
            raise ConfigError("multi-modal prediction needs constant-velocity parameters")
        pred = rollout_rnn(histories, params, CaModel(dt), horizon)
    elif isinstance(params, CvParams):
        if modes is not None:
            mix = predict_multimodal(histories, params, modes, CvModel(dt), horizon, cov_scale_power)
            return mix.means, mix.covs, mix.probs
        pred, _ = rollout(histories, params, CvModel(dt), horizon)
    else:
        raise ConfigError(f"unsupported parameter bundle {type(params).__name__}")
    return pred.z_hat[:, None], pred.cov[:, None], np.ones(1)


def _score_chunk(args):
    params, hist, fut, dt, modes, power, threshold = args
    horizon = fut.shape[1]
    means, covs, probs = predict_chunk(params, hist, horizon, dt, modes, power)
    # the unimodal indicators and the calibration report use the most probable mode
    j = int(np.argmax(probs))
    steps = StepAccumulator(horizon, threshold).update(fut, means[:, j], covs[:, j])
    cov = CovarianceAccumulator(horizon).update(fut, means[:, j], covs[:, j])
    mm = None
    if modes is not None:
        mm = MultiModalAccumulator(horizon, threshold).update(fut, means, covs, probs)
    return steps, cov, mm


def evaluate(params, samples: SampleSet, modes: ModeSet | None = None, dt: float = 0.2,
             workers: int = 1, level: float = 1.0, cov_scale_power: int = 2,
             threshold: float = 2.0, chunk: int = CHUNK) -> EvalResult:
    n = len(samples)
    if n == 0:
        raise DataError("no samples in the test set")
    if workers < 1:
        raise ConfigError("workers must be at least 1")
    jobs = [(params, samples.histories[s:s + chunk], samples.futures[s:s + chunk], dt, modes,
             cov_scale_power, threshold) for s in range(0, n, chunk)]
    if workers == 1:
        parts = [_score_chunk(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_score_chunk, jobs))
    steps = reduce(lambda a, b: a + b, (p[0] for p in parts))
    cov = reduce(lambda a, b: a + b, (p[1] for p in parts))
    mm = reduce(lambda a, b: a + b, (p[2] for p in parts)) if modes is not None else None
    return EvalResult(steps.result(), cov.result(dt=dt, level=level),
                      mm.result() if mm is not None else None, n, dt)
