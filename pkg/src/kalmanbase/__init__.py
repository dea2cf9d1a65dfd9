"""Kalman-filter baselines for vehicle trajectory prediction."""
from .data import (
    DatasetSplit, FormatSpec, RawTrack, SampleSet, SynthSpec, TrajectorySample, load_tracks,
    split_by_vehicle, synth_generate, window_samples,
)
from .estimators import CVKalmanPredictor, MultiModalCVPredictor, RNNKalmanPredictor
from .evaluation import evaluate
from .exceptions import ConfigError, DataError, KalmanBaseError, NumericalError
from .kalman import CvModel, CvParams, GaussianState, PredictedTrajectory, rollout
from .metrics import (
    CovarianceReport, MultiModalMetrics, StepMetrics, covariance_report, fde, miss_rate, mnll,
    multimodal_metrics, nll_point, rmse, similarity, step_metrics,
)
from .multimodal import ExplorationSpec, MixturePrediction, ModeSet, predict_multimodal, quantize
from .rnn import CaModel, RnnParams, rollout_rnn
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "CaModel", "ConfigError", "CovarianceReport", "CVKalmanPredictor", "CvModel", "CvParams",
    "DataError", "DatasetSplit", "ExplorationSpec", "FormatSpec", "GaussianState", "KalmanBaseError",
    "MixturePrediction", "ModeSet", "MultiModalCVPredictor", "MultiModalMetrics", "NumericalError",
    "PredictedTrajectory", "RNNKalmanPredictor", "RawTrack", "RnnParams", "SampleSet", "StepMetrics",
    "SynthSpec", "TrainConfig", "TrajectorySample", "covariance_report", "evaluate", "fde", "fit",
    "load_tracks", "miss_rate", "mnll", "multimodal_metrics", "nll_point", "predict_multimodal",
    "quantize", "rmse", "rollout", "rollout_rnn", "similarity", "split_by_vehicle", "step_metrics",
    "synth_generate", "window_samples",
]
