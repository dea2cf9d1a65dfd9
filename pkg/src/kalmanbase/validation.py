"""Input validation for the estimator API.

Histories and futures are accepted either as (n, T, 2) arrays or flattened
(n, 2 T) rows, the latter so that plain 2-D feature matrices pass through
sklearn tooling unchanged.
"""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array, check_consistent_length

from .exceptions import DataError


def check_trajectories(X, n_steps: int | None = None, name: str = "X") -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True, input_name=name)
    if X.ndim == 2:
        if X.shape[1] % 2:
            raise DataError(f"{name}: flattened rows need an even number of columns, got {X.shape[1]}")
        X = X.reshape(X.shape[0], -1, 2)
    if X.ndim != 3 or X.shape[2] != 2:
        raise DataError(f"{name}: expected shape (n, T, 2), got {X.shape}")
    if n_steps is not None and X.shape[1] != n_steps:
        raise DataError(f"{name}: expected {n_steps} steps, got {X.shape[1]}")
    return X


def check_histories_futures(X, y, history_len: int | None = None, horizon: int | None = None):
    X = check_trajectories(X, history_len, "X")
    y = check_trajectories(y, horizon, "y")
    check_consistent_length(X, y)
    return X, y
