import numpy as np
import pytest
import torch

from kalmanbase.data import SynthSpec, synth_generate


@pytest.fixture(scope="session")
def small_split():
    return synth_generate(SynthSpec(n_tracks=60, track_len=44, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numpy_kalman(Z, A, Q, H, R, x0, P0, horizon):
    """Textbook filter with an explicit inverse and the Joseph-free update."""
    x, P = x0.copy(), P0.copy()
    for z in Z:
        x = A @ x
        P = A @ P @ A.T + Q
        S = H @ P @ H.T + R
        K = P @ H.T @ np.linalg.inv(S)
        x = x + K @ (z - H @ x)
        P = (np.eye(len(x)) - K @ H) @ P
    means, covs = [], []
    for _ in range(horizon):
        x = A @ x
        P = A @ P @ A.T + Q
        means.append(H @ x)
        covs.append(H @ P @ H.T)
    return np.array(means), np.array(covs)


def cv_matrices(dt):
    A1 = np.array([[1, dt], [0, 1]])
    E1 = np.array([[dt**2 / 2], [dt]])
    A = np.kron(np.eye(2), A1)
    E = np.kron(np.eye(2), E1)
    H = np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]])
    return A, E, H


torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
