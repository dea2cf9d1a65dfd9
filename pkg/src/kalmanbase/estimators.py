"""Scikit-learn style estimators around the filters.

``X`` holds histories (n, 15, 2) and ``y`` futures (n, 25, 2), both in the
local frame and in meters; flattened (n, 30) / (n, 50) rows are accepted.
``predict`` returns mean positions, ``predict_dist`` adds covariances, and
``score`` is the negative mean NLL (higher is better).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import SampleSet
from .kalman import HORIZON, CvModel, CvParams, rollout
from .metrics import mixture_nll, nll_point
from .multimodal import ExplorationSpec, MixturePrediction, predict_multimodal, quantize
from .rnn import CaModel, rollout_rnn
from .training import TrainConfig, fit
from .validation import check_histories_futures, check_trajectories


def _as_samples(X, y, groups):
    groups = np.arange(len(X)) if groups is None else np.asarray(groups)
    return SampleSet(X, y, groups)


class _KalmanEstimator(RegressorMixin, BaseEstimator):
    predictor = None

    def _train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.random_state, clip_norm=self.clip_norm,
                           val_fraction=self.val_fraction)

    def _fit(self, X, y, groups, **kwargs):
        X, y = check_histories_futures(X, y)
        self.horizon_ = y.shape[1]
        self.params_, self.training_log_, self.optimizer_state_ = fit(
            _as_samples(X, y, groups), self._train_config(), self.predictor,
            init_params=self.init_params, callback=None, dt=self.dt, **kwargs)
        return self

    def predict(self, X):
        return self.predict_dist(X).z_hat

    def score(self, X, y, sample_weight=None):
        X, y = check_histories_futures(X, y, horizon=getattr(self, "horizon_", None))
        pred = self.predict_dist(X)
        err = y - pred.z_hat
        nll = nll_point(err[..., 0], err[..., 1], pred.cov).mean(axis=1)
        return -float(np.average(nll, weights=sample_weight))


class CVKalmanPredictor(_KalmanEstimator):
    """Constant-velocity Kalman filter with maximum-likelihood noise parameters."""

    predictor = "cv"

    def __init__(self, dt=0.2, learning_rate=1e-3, batch_size=256, epochs=20, clip_norm=10.0,
                 val_fraction=0.1, random_state=0, init_params=None):
        self.dt = dt
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip_norm = clip_norm
        self.val_fraction = val_fraction
        self.random_state = random_state
        self.init_params = init_params

    def fit(self, X, y, groups=None):
        """``groups`` are vehicle ids used for the validation split."""
        return self._fit(X, y, groups)

    def predict_dist(self, X, horizon=None):
        check_is_fitted(self, "params_")
        X = check_trajectories(X)
        pred, _ = rollout(X, self.params_, CvModel(self.dt), horizon or self.horizon_)
        return pred


class RNNKalmanPredictor(_KalmanEstimator):
    """Constant-acceleration Kalman filter driven by LSTM jerk commands."""

    predictor = "rnn"

    def __init__(self, hidden_size=32, dt=0.2, learning_rate=1e-3, batch_size=64, epochs=20,
                 clip_norm=10.0, val_fraction=0.1, random_state=0, init_params=None):
        self.hidden_size = hidden_size
        self.dt = dt
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip_norm = clip_norm
        self.val_fraction = val_fraction
        self.random_state = random_state
        self.init_params = init_params

    def fit(self, X, y, groups=None):
        return self._fit(X, y, groups, hidden_size=self.hidden_size)

    def predict_dist(self, X, horizon=None):
        check_is_fitted(self, "params_")
        X = check_trajectories(X)
        return rollout_rnn(X, self.params_, CaModel(self.dt), horizon or self.horizon_)


class MultiModalCVPredictor(BaseEstimator):
    """Gaussian-mixture extension of a fitted constant-velocity filter.

    With ``cv_params`` given, ``fit`` only quantizes the exploration
    distribution (no training). Otherwise a ``CVKalmanPredictor`` built from
    ``cv_options`` is fitted first.
    """

    def __init__(self, sigma_theta=0.0, sigma_alpha=0.1, k=6, n_mc=100_000, random_state=0,
                 cov_scale_power=2, dt=0.2, cv_params=None, cv_options=None):
        self.sigma_theta = sigma_theta
        self.sigma_alpha = sigma_alpha
        self.k = k
        self.n_mc = n_mc
        self.random_state = random_state
        self.cov_scale_power = cov_scale_power
        self.dt = dt
        self.cv_params = cv_params
        self.cv_options = cv_options

    def fit(self, X=None, y=None, groups=None):
        if self.cv_params is None:
            if X is None or y is None:
                raise ValueError("X and y are required when cv_params is not given")
            base = CVKalmanPredictor(dt=self.dt, **(self.cv_options or {})).fit(X, y, groups)
            self.params_ = base.params_
        else:
            self.params_ = self.cv_params if isinstance(self.cv_params, CvParams) \
                else CvParams.from_dict(self.cv_params)
        self.modes_ = quantize(ExplorationSpec(self.sigma_theta, self.sigma_alpha, self.k,
                                               self.n_mc, self.random_state))
        self.horizon_ = HORIZON if y is None else check_trajectories(y).shape[1]
        return self

    def predict_mixture(self, X, horizon=None) -> MixturePrediction:
        check_is_fitted(self, "modes_")
        X = check_trajectories(X)
        return predict_multimodal(X, self.params_, self.modes_, CvModel(self.dt),
                                  horizon or self.horizon_, self.cov_scale_power)

    def predict(self, X):
        """Means of the most probable mode."""
        mix = self.predict_mixture(X)
        return mix.means[:, int(np.argmax(mix.probs))]

    def score(self, X, y, sample_weight=None):
        """Negative mean mixture NLL."""
        X, y = check_histories_futures(X, y)
        mix = self.predict_mixture(X, y.shape[1])
        err = y[:, None] - mix.means
        nll = nll_point(err[..., 0], err[..., 1], mix.covs)
        mm = mixture_nll(np.moveaxis(nll, 1, -1), mix.probs).mean(axis=1)
        return -float(np.average(mm, weights=sample_weight))
