"""Grids, distributions, echo trains and signals.

All objects are immutable after construction: array fields are copied and
flagged read-only, so they can be shared between threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import DegenerateInputError, ParameterError

GridKind = Literal["dense-linear", "log-spaced"]

DENSE_T2_MIN_MS = 1.0
DENSE_T2_MAX_MS = 2000.0
LOG_T2_MIN_MS = 10.0
LOG_T2_MAX_MS = 2000.0
N_LOG_POINTS = 60

MASS_TOL = 1e-9


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class T2Grid:
    """Ordered T2 sample points in milliseconds."""

    values: np.ndarray
    kind: GridKind

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 1 or values.size < 2:
            raise ParameterError("a T2 grid needs at least two points")
        if not np.all(np.isfinite(values)) or values[0] <= 0:
            raise ParameterError("T2 grid values must be finite and positive")
        if np.any(np.diff(values) <= 0):
            raise ParameterError("T2 grid must be strictly increasing")
        if self.kind not in ("dense-linear", "log-spaced"):
            raise ParameterError(f"unknown grid kind {self.kind!r}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, T2Grid):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.values, other.values)

    def __hash__(self) -> int:
        return hash((self.kind, self.values.tobytes()))

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "n_points": int(self.values.size),
            "t2_min_ms": float(self.values[0]),
            "t2_max_ms": float(self.values[-1]),
        }


def make_t2_grid(
    kind: GridKind,
    n_points: int | None = N_LOG_POINTS,
    t2_min_ms: float = LOG_T2_MIN_MS,
    t2_max_ms: float = LOG_T2_MAX_MS,
) -> T2Grid:
    """Build a T2 grid.

    A ``dense-linear`` grid ignores `n_points` and steps by 1 ms from
    `t2_min_ms` up to `t2_max_ms`. A ``log-spaced`` grid has `n_points`
    values with constant ratio between neighbours and exact endpoints.
    """
    if not (0 < t2_min_ms < t2_max_ms) or not np.isfinite(t2_max_ms):
        raise ParameterError(f"invalid T2 bounds ({t2_min_ms}, {t2_max_ms})")
    if kind == "dense-linear":
        n = int(np.floor(t2_max_ms - t2_min_ms + 1e-9)) + 1
        return T2Grid(t2_min_ms + np.arange(n, dtype=np.float64), kind)
    if kind == "log-spaced":
        if n_points is None or int(n_points) != n_points or n_points < 2:
            raise ParameterError(f"n_points must be an integer >= 2, got {n_points}")
        values = np.geomspace(t2_min_ms, t2_max_ms, int(n_points))
        values[0], values[-1] = t2_min_ms, t2_max_ms
        return T2Grid(values, kind)
    raise ParameterError(f"unknown grid kind {kind!r}")


def dense_grid() -> T2Grid:
    return make_t2_grid("dense-linear", None, DENSE_T2_MIN_MS, DENSE_T2_MAX_MS)


def inference_grid() -> T2Grid:
    return make_t2_grid("log-spaced", N_LOG_POINTS, LOG_T2_MIN_MS, LOG_T2_MAX_MS)


@dataclass(frozen=True, eq=False)
class T2Distribution:
    """Non-negative bin masses over a grid, summing to one."""

    grid: T2Grid
    weights: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.shape != (len(self.grid),):
            raise ParameterError(
                f"weights shape {w.shape} does not match grid of {len(self.grid)} points"
            )
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ParameterError("distribution weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > MASS_TOL:
            raise ParameterError(f"distribution mass {w.sum()!r} differs from 1")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_masses(cls, grid: T2Grid, masses) -> "T2Distribution":
        """Renormalise arbitrary non-negative masses into a distribution."""
        m = np.asarray(masses, dtype=np.float64)
        total = m.sum()
        if not np.isfinite(total) or total <= 0:
            raise DegenerateInputError("cannot normalise a distribution with zero mass")
        return cls(grid, m / total)

    @classmethod
    def delta(cls, grid: T2Grid, index: int) -> "T2Distribution":
        w = np.zeros(len(grid))
        w[index] = 1.0
        return cls(grid, w)

    @classmethod
    def uniform(cls, grid: T2Grid) -> "T2Distribution":
        return cls(grid, np.full(len(grid), 1.0 / len(grid)))


@dataclass(frozen=True)
class EchoTrain:
    """Uniform CPMG echo train: echo ``i`` (1-based) sits at ``i * delta_te``."""

    delta_te: float
    n_echoes: int
    flip_angle: float = 180.0
    t1: float = 1000.0

    def __post_init__(self):
        if not (np.isfinite(self.delta_te) and self.delta_te > 0):
            raise ParameterError(f"delta_te must be positive, got {self.delta_te}")
        if int(self.n_echoes) != self.n_echoes or self.n_echoes < 1:
            raise ParameterError(f"n_echoes must be a positive integer, got {self.n_echoes}")
        if not (90.0 <= self.flip_angle <= 180.0):
            raise ParameterError(f"flip angle must lie in [90, 180] degrees, got {self.flip_angle}")
        if not (np.isfinite(self.t1) and self.t1 > 0):
            raise ParameterError(f"t1 must be positive, got {self.t1}")
        object.__setattr__(self, "delta_te", float(self.delta_te))
        object.__setattr__(self, "n_echoes", int(self.n_echoes))
        object.__setattr__(self, "flip_angle", float(self.flip_angle))
        object.__setattr__(self, "t1", float(self.t1))

    @property
    def echo_times(self) -> np.ndarray:
        return self.delta_te * np.arange(1, self.n_echoes + 1, dtype=np.float64)

    @property
    def in_training_range(self) -> bool:
        return 5.0 <= self.delta_te <= 15.0


@dataclass(frozen=True, eq=False)
class MultiEchoSignal:
    values: np.ndarray
    echo_train: EchoTrain

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != (self.echo_train.n_echoes,):
            raise ParameterError(
                f"signal has {v.shape} values for a {self.echo_train.n_echoes}-echo train"
            )
        if not np.all(np.isfinite(v)):
            raise ParameterError("signal values must be finite")
        object.__setattr__(self, "values", v)


def normalize_signal(raw: MultiEchoSignal) -> MultiEchoSignal:
    """Divide every echo by the first one."""
    first = raw.values[0]
    if not first > 0:
        raise DegenerateInputError(f"first echo must be positive, got {first}")
    values = raw.values / first
    values[0] = 1.0
    return MultiEchoSignal(values, raw.echo_train)


def normalize_signals(signals: np.ndarray) -> np.ndarray:
    """Array form of :func:`normalize_signal` over the last axis."""
    signals = np.asarray(signals, dtype=np.float64)
    first = signals[..., :1]
    if np.any(~(first > 0)):
        raise DegenerateInputError("first echo must be positive for every signal")
    out = signals / first
    out[..., 0] = 1.0
    return out


# -- downsampling -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _BinMap:
    start: int
    stop: int
    # reduceat offsets relative to `start`, one per target bin (empty bins allowed)
    offsets: np.ndarray
    empty: np.ndarray


_binmap_cache: dict[tuple[int, int], _BinMap] = {}


def geometric_bin_edges(target: T2Grid) -> np.ndarray:
    """Bin edges at geometric means of neighbours, outer edges at the grid bounds."""
    v = target.values
    inner = np.sqrt(v[:-1] * v[1:])
    return np.concatenate(([v[0]], inner, [v[-1]]))


def _bin_map(dense: T2Grid, target: T2Grid) -> _BinMap:
    key = (hash(dense), hash(target))
    cached = _binmap_cache.get(key)
    if cached is not None:
        return cached
    edges = geometric_bin_edges(target)
    t = dense.values
    inside = (t >= edges[0]) & (t <= edges[-1])
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise DegenerateInputError("dense grid does not overlap the target grid")
    start, stop = int(idx[0]), int(idx[-1]) + 1
    # a dense point sitting exactly on an inner edge goes to the upper bin
    firsts = np.searchsorted(t[start:stop], edges[1:-1], side="left")
    offsets = np.concatenate(([0], firsts)).astype(np.intp)
    counts = np.diff(np.concatenate((offsets, [stop - start])))
    bm = _BinMap(start, stop, offsets, counts == 0)
    _binmap_cache[key] = bm
    return bm


def bin_counts(dense: T2Grid, target: T2Grid) -> np.ndarray:
    bm = _bin_map(dense, target)
    return np.diff(np.concatenate((bm.offsets, [bm.stop - bm.start])))


def downsample_masses(dense_weights: np.ndarray, dense: T2Grid, target: T2Grid) -> np.ndarray:
    """Sum dense masses into target bins, over the last axis, without renormalising."""
    bm = _bin_map(dense, target)
    w = np.asarray(dense_weights, dtype=np.float64)[..., bm.start : bm.stop]
    offsets = np.minimum(bm.offsets, w.shape[-1] - 1)
    out = np.add.reduceat(w, offsets, axis=-1)
    out[..., bm.empty] = 0.0
    return out


def downsample_distribution(dense: T2Distribution, target: T2Grid) -> T2Distribution:
    """Project a dense-grid distribution onto the (log-spaced) target grid.

    Dense mass outside the target's outer bounds is dropped and the result is
    renormalised to unit mass.
    """
    masses = downsample_masses(dense.weights, dense.grid, target)
    total = masses.sum()
    if not total > 0:
        raise DegenerateInputError("all dense mass lies outside the target grid bounds")
    return T2Distribution(target, masses / total)
