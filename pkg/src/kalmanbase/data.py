"""Trajectory ingestion, windowing into history/future pairs, and a
synthetic ground-truth generator.

Samples live in a local frame: the position at ``t0`` is the origin, axes
keep their original orientation (optionally rotated, see ``align_heading``).
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataError

log = logging.getLogger(__name__)

FEET_TO_METERS = 0.3048
HISTORY_LEN = 15
HORIZON = 25


@dataclass
class RawTrack:
    vehicle_id: int
    t: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        if len(self.t) != len(self.xy):
            raise DataError(f"track {self.vehicle_id}: {len(self.t)} times for {len(self.xy)} positions")
        if np.any(np.diff(self.t) <= 0):
            raise DataError(f"track {self.vehicle_id}: time is not strictly increasing")
        if not np.all(np.isfinite(self.xy)):
            raise DataError(f"track {self.vehicle_id}: non-finite coordinates")

    def __len__(self):
        return len(self.t)


@dataclass
class TrajectorySample:
    history: np.ndarray
    future: np.ndarray
    source_id: str = ""


@dataclass
class SampleSet:
    """Columnar batch of samples: histories (N, 15, 2), futures (N, 25, 2)."""

    histories: np.ndarray
    futures: np.ndarray
    vehicle_ids: np.ndarray
    t0: np.ndarray = None

    def __post_init__(self):
        self.histories = np.asarray(self.histories, dtype=float)
        self.futures = np.asarray(self.futures, dtype=float)
        self.vehicle_ids = np.asarray(self.vehicle_ids, dtype=np.int64)
        if self.t0 is None:
            self.t0 = np.zeros(len(self.histories))
        self.t0 = np.asarray(self.t0, dtype=float)
        n = len(self.histories)
        if not (len(self.futures) == len(self.vehicle_ids) == len(self.t0) == n):
            raise DataError("sample arrays have inconsistent lengths")

    def __len__(self):
        return len(self.histories)

    def __getitem__(self, i) -> TrajectorySample:
        return TrajectorySample(
            self.histories[i], self.futures[i], f"{self.vehicle_ids[i]}@{self.t0[i]:.3f}"
        )

    def subset(self, idx) -> SampleSet:
        return SampleSet(self.histories[idx], self.futures[idx], self.vehicle_ids[idx], self.t0[idx])

    @classmethod
    def concat(cls, sets) -> SampleSet:
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.histories for s in sets]),
            np.concatenate([s.futures for s in sets]),
            np.concatenate([s.vehicle_ids for s in sets]),
            np.concatenate([s.t0 for s in sets]),
        )

    @classmethod
    def empty(cls, history_len=HISTORY_LEN, horizon=HORIZON) -> SampleSet:
        return cls(np.zeros((0, history_len, 2)), np.zeros((0, horizon, 2)), np.zeros(0, int))


@dataclass
class DatasetSplit:
    train: SampleSet
    test: SampleSet
    seed: int = 0
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# ingestion


@dataclass
class FormatSpec:
    """Column mapping for delimiter-separated track files.

    Time comes either from ``time`` (seconds) or from ``frame`` divided by
    ``frame_rate``. ``id`` may list several columns (e.g. location and
    vehicle id) that jointly identify a track.
    """

    id: str | list = "id"
    x: str = "x"
    y: str = "y"
    time: str | None = "t"
    frame: str | None = None
    frame_rate: float | None = None
    unit: str = "m"
    delimiter: str = ","

    def __post_init__(self):
        if self.unit not in ("m", "ft"):
            raise ConfigError(f"unit must be 'm' or 'ft', got {self.unit!r}")
        if self.frame is not None and not self.frame_rate:
            raise ConfigError("frame column given without frame_rate")

    @classmethod
    def ngsim(cls) -> FormatSpec:
        return cls(id="Vehicle_ID", x="Local_X", y="Local_Y", time=None,
                   frame="Frame_ID", frame_rate=10.0, unit="ft")


def load_tracks(path, format_spec: FormatSpec | dict | None = None) -> list[RawTrack]:
    import pandas as pd

    fmt = format_spec if isinstance(format_spec, FormatSpec) else FormatSpec(**(format_spec or {}))
    path = Path(path)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    df = pd.read_csv(path, sep=fmt.delimiter, skipinitialspace=True)
    id_cols = [fmt.id] if isinstance(fmt.id, str) else list(fmt.id)
    time_col = fmt.frame if fmt.frame is not None else fmt.time
    for role, col in [("id", c) for c in id_cols] + [("time", time_col), ("x", fmt.x), ("y", fmt.y)]:
        if col is None or col not in df.columns:
            raise DataError(f"schema error: column {col!r} for field '{role}' not in {list(df.columns)}")

    if len(id_cols) == 1:
        ids = df[id_cols[0]].to_numpy()
        if not np.issubdtype(ids.dtype, np.integer):
            ids = pd.factorize(df[id_cols[0]])[0]
    else:
        ids = df.groupby(id_cols, sort=True).ngroup().to_numpy()
    t = df[time_col].to_numpy(dtype=float)
    if fmt.frame is not None:
        t = t / fmt.frame_rate
    scale = FEET_TO_METERS if fmt.unit == "ft" else 1.0
    xy = np.column_stack([df[fmt.x].to_numpy(float), df[fmt.y].to_numpy(float)]) * scale

    order = np.lexsort((t, ids))
    ids, t, xy = ids[order], t[order], xy[order]
    bounds = np.flatnonzero(np.diff(ids)) + 1
    tracks = []
    for lo, hi in zip(np.r_[0, bounds], np.r_[bounds, len(ids)]):
        vid = int(ids[lo])
        if np.any(np.diff(t[lo:hi]) <= 0):
            raise DataError(f"track {vid}: time is not strictly increasing (duplicate timestamps)")
        tracks.append(RawTrack(vid, t[lo:hi], xy[lo:hi]))
    log.info("loaded %d tracks (%d rows) from %s", len(tracks), len(df), path)
    return tracks


# --------------------------------------------------------------------------
# windowing


def infer_rate(tracks) -> float:
    diffs = np.concatenate([np.diff(tr.t) for tr in tracks if len(tr) > 1] or [np.zeros(0)])
    if diffs.size == 0:
        raise DataError("cannot infer the sampling rate from single-point tracks")
    return float(np.round(1.0 / np.median(diffs), 6))


def contiguous_segments(track: RawTrack, source_rate: float) -> list[np.ndarray]:
    """Index arrays of gap-free runs (a gap is a step above 1.5 periods)."""
    gaps = np.flatnonzero(np.diff(track.t) > 1.5 / source_rate) + 1
    return np.split(np.arange(len(track)), gaps)


def _rotate_to_heading(windows: np.ndarray, history_len: int) -> np.ndarray:
    d = windows[:, history_len - 1] - windows[:, 0]
    phi = np.arctan2(d[:, 1], d[:, 0])
    phi[np.hypot(d[:, 0], d[:, 1]) == 0] = 0.0
    c, s = np.cos(-phi), np.sin(-phi)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    return np.einsum("nij,ntj->nti", rot, windows)


def window_samples(
    tracks,
    rate: float = 5.0,
    source_rate: float | None = None,
    history_len: int = HISTORY_LEN,
    horizon: int = HORIZON,
    align_heading: bool = False,
) -> SampleSet:
    """Slide a (history_len + horizon)-point window over every track.

    Windows stride one output period; a 10 Hz source is decimated by keeping
    every other sample aligned to ``t0``.
    """
    tracks = list(tracks)
    if not tracks:
        return SampleSet.empty(history_len, horizon)
    source_rate = source_rate or infer_rate(tracks)
    ratio = source_rate / rate
    step = int(round(ratio))
    if step < 1 or abs(ratio - step) > 1e-6:
        raise DataError(f"output rate {rate} Hz does not divide source rate {source_rate} Hz")
    offsets = np.arange(-(history_len - 1), horizon + 1) * step
    out = []
    for tr in tracks:
        for seg in contiguous_segments(tr, source_rate):
            first = (history_len - 1) * step
            last = len(seg) - 1 - horizon * step
            if last < first:
                continue
            centers = np.arange(first, last + 1, step)
            idx = seg[centers[:, None] + offsets[None, :]]
            win = tr.xy[idx]
            win = win - win[:, history_len - 1 : history_len, :]
            if align_heading:
                win = _rotate_to_heading(win, history_len)
            out.append(SampleSet(win[:, :history_len], win[:, history_len:],
                                 np.full(len(win), tr.vehicle_id), tr.t[seg[centers]]))
    if not out:
        return SampleSet.empty(history_len, horizon)
    return SampleSet.concat(out)


def split_by_vehicle(samples: SampleSet, test_fraction: float, seed: int):
    """Seeded random partition of vehicle ids; returns ``(train, test)``."""
    vids = np.unique(samples.vehicle_ids)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(vids)
    n_test = int(round(test_fraction * len(vids)))
    test_ids = perm[:n_test]
    is_test = np.isin(samples.vehicle_ids, test_ids)
    return samples.subset(~is_test), samples.subset(is_test)


# --------------------------------------------------------------------------
# synthetic ground truth


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings for synthetic tracks.

    Latent states follow the constant-velocity dynamics driven by Gaussian
    acceleration noise (plus an optional sinusoidal lateral acceleration).
    Initial speed and heading (radians, around +x) are uniform.
    History points are noisy observations; future points are the latent
    positions unless ``noisy_future`` is set.
    """

    n_tracks: int = 1000
    sigma_accel: tuple = (0.5, 0.3)
    obs_noise: tuple = ((0.25, 0.0), (0.0, 0.25))
    init_speed_range: tuple = (10.0, 30.0)
    heading_range: float = 0.2
    maneuver: str = "none"
    amplitude: float = 0.0
    period: float = 6.0
    seed: int = 0
    dt: float = 0.2
    track_len: int = HISTORY_LEN + HORIZON
    test_fraction: float = 0.2
    noisy_future: bool = False

    def __post_init__(self):
        R = np.asarray(self.obs_noise, dtype=float)
        if R.shape != (2, 2) or not np.allclose(R, R.T) or np.linalg.eigvalsh(R).min() < -1e-12:
            raise ConfigError("obs_noise must be a symmetric positive semi-definite 2x2 matrix")
        if len(self.sigma_accel) != 2 or min(self.sigma_accel) < 0:
            raise ConfigError("sigma_accel must be two non-negative stds")
        if self.maneuver not in ("none", "sinusoidal_accel"):
            raise ConfigError(f"unknown maneuver {self.maneuver!r}")
        if self.heading_range < 0:
            raise ConfigError("heading_range must be >= 0")
        if self.amplitude < 0 or self.period <= 0:
            raise ConfigError("amplitude must be >= 0 and period > 0")
        lo, hi = self.init_speed_range
        if lo < 0 or hi < lo:
            raise ConfigError("init_speed_range must satisfy 0 <= low <= high")
        if self.n_tracks < 1 or self.track_len < HISTORY_LEN + HORIZON:
            raise ConfigError("need n_tracks >= 1 and track_len >= 40")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sigma_accel"] = list(d["sigma_accel"])
        d["obs_noise"] = [list(r) for r in d["obs_noise"]]
        d["init_speed_range"] = list(d["init_speed_range"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        d = dict(d)
        for key in ("sigma_accel", "init_speed_range"):
            if key in d:
                d[key] = tuple(d[key])
        if "obs_noise" in d:
            d["obs_noise"] = tuple(tuple(r) for r in d["obs_noise"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid synth spec: {exc}") from None


def _psd_sqrt(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(C)
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate_tracks(spec: SynthSpec):
    """Return latent states (n, L, 4) as (x, v_x, y, v_y) and noisy
    position observations (n, L, 2)."""
    rng = np.random.default_rng(spec.seed)
    n, L, dt = spec.n_tracks, spec.track_len, spec.dt
    speed = rng.uniform(*spec.init_speed_range, size=n)
    heading = rng.uniform(-spec.heading_range, spec.heading_range, size=n)
    X = np.zeros((n, 4))
    X[:, 1] = speed * np.cos(heading)
    X[:, 3] = speed * np.sin(heading)
    omega = 2 * np.pi / spec.period
    phase = rng.uniform(0, 2 * np.pi, size=n)
    amp = spec.amplitude if spec.maneuver == "sinusoidal_accel" else 0.0
    if amp:
        # zero-mean lateral velocity: the vehicle weaves without drifting
        X[:, 3] += -amp / omega * np.cos(phase)
    noise = rng.standard_normal((n, L, 2)) * np.asarray(spec.sigma_accel, dtype=float)
    states = np.empty((n, L, 4))
    states[:, 0] = X
    for k in range(L - 1):
        a = noise[:, k].copy()
        if amp:
            a[:, 1] += amp * np.sin(omega * (k + 0.5) * dt + phase)
        X = np.column_stack([
            X[:, 0] + dt * X[:, 1] + 0.5 * dt**2 * a[:, 0],
            X[:, 1] + dt * a[:, 0],
            X[:, 2] + dt * X[:, 3] + 0.5 * dt**2 * a[:, 1],
            X[:, 3] + dt * a[:, 1],
        ])
        states[:, k + 1] = X
    pos = states[:, :, [0, 2]]
    eps = rng.standard_normal((n, L, 2)) @ _psd_sqrt(np.asarray(spec.obs_noise, dtype=float)).T
    return states, pos + eps


def synth_generate(spec: SynthSpec) -> DatasetSplit:
    states, obs = simulate_tracks(spec)
    latent = states[:, :, [0, 2]]
    target = obs if spec.noisy_future else latent
    n, L = obs.shape[:2]
    centers = np.arange(HISTORY_LEN - 1, L - HORIZON)
    hidx = centers[:, None] + np.arange(-(HISTORY_LEN - 1), 1)[None, :]
    fidx = centers[:, None] + np.arange(1, HORIZON + 1)[None, :]
    origin = obs[:, centers][:, :, None, :]
    hist = (obs[:, hidx] - origin).reshape(-1, HISTORY_LEN, 2)
    fut = (target[:, fidx] - origin).reshape(-1, HORIZON, 2)
    vids = np.repeat(np.arange(n), len(centers))
    t0 = np.tile(centers * spec.dt, n)
    samples = SampleSet(hist, fut, vids, t0)
    train, test = split_by_vehicle(samples, spec.test_fraction, spec.seed)
    meta = {
        "generator": spec.to_dict(),
        "true_q_factor": np.diag(spec.sigma_accel).tolist(),
        "true_r_obs": [list(map(float, r)) for r in spec.obs_noise],
    }
    return DatasetSplit(train, test, spec.seed, meta)


# --------------------------------------------------------------------------
# dataset cache


def dataset_cache_key(source: Path | None, params: dict) -> str:
    h = hashlib.sha256()
    if source is not None:
        with open(source, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    h.update(json.dumps(params, sort_keys=True).encode())
    return h.hexdigest()[:16]


def save_dataset(split: DatasetSplit, path) -> None:
    arrays = {}
    for name in ("train", "test"):
        s = getattr(split, name)
        arrays[f"{name}_histories"] = s.histories
        arrays[f"{name}_futures"] = s.futures
        arrays[f"{name}_vehicle_ids"] = s.vehicle_ids
        arrays[f"{name}_t0"] = s.t0
    arrays["meta"] = np.array(json.dumps({"seed": split.seed, **split.meta}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path) -> DatasetSplit:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset cache not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        sets = {
            name: SampleSet(z[f"{name}_histories"], z[f"{name}_futures"],
                            z[f"{name}_vehicle_ids"], z[f"{name}_t0"])
            for name in ("train", "test")
        }
        meta = json.loads(str(z["meta"]))
    seed = meta.pop("seed", 0)
    return DatasetSplit(sets["train"], sets["test"], seed, meta)
