"""Extended Phase Graph model of CPMG multi-echo spin-echo decay.

States are (F+, F-, Z) per dephasing order. The excitation puts the
magnetisation along the refocusing axis (CPMG condition), so in the
phase convention used here every state stays real.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend
from .core import EchoTrain, MultiEchoSignal, T2Distribution, T2Grid
from .errors import ParameterError


@dataclass(frozen=True, eq=False)
class DecayMatrix:
    """Dictionary mapping a T2 distribution on `grid` to echo amplitudes."""

    entries: np.ndarray
    echo_train: EchoTrain
    grid: T2Grid

    def __post_init__(self):
        e = np.array(self.entries, dtype=np.float64)
        if e.shape != (self.echo_train.n_echoes, len(self.grid)):
            raise ParameterError(f"decay matrix shape {e.shape} inconsistent with train/grid")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)


def _check_t2(t2) -> np.ndarray:
    t2 = np.atleast_1d(np.asarray(t2, dtype=np.float64))
    if not np.all(np.isfinite(t2)) or np.any(t2 <= 0):
        raise ParameterError("T2 values must be positive and finite")
    return t2


def epg_dictionary(echo_train: EchoTrain, t2_values) -> np.ndarray:
    """``(n_echoes, n_t2)`` echo amplitudes, one column per T2 value."""
    t2 = _check_t2(t2_values)
    out = _backend.epg_cpmg(
        echo_train.delta_te, echo_train.n_echoes, echo_train.flip_angle, echo_train.t1, t2
    )
    return np.minimum(np.asarray(out), 1.0)


def epg_echo_amplitudes(echo_train: EchoTrain, t2_ms: float) -> np.ndarray:
    if not (np.isfinite(t2_ms) and t2_ms > 0):
        raise ParameterError(f"t2 must be positive, got {t2_ms}")
    return epg_dictionary(echo_train, [t2_ms])[:, 0]


def build_dictionary(echo_train: EchoTrain, grid: T2Grid) -> DecayMatrix:
    return DecayMatrix(epg_dictionary(echo_train, grid.values), echo_train, grid)


def forward_signal(dictionary: DecayMatrix, p: T2Distribution) -> MultiEchoSignal:
    """Noiseless multi-echo signal of distribution `p`."""
    if p.grid != dictionary.grid:
        raise ParameterError("distribution grid differs from the dictionary grid")
    return MultiEchoSignal(dictionary.entries @ p.weights, dictionary.echo_train)


def forward_sparse(echo_train: EchoTrain, grid: T2Grid, weights: np.ndarray) -> np.ndarray:
    """Same product as :func:`forward_signal` but only simulating columns with
    non-zero weight. Used by the data generators, where each sample has its
    own echo train and the dense grid has 2000 points.
    """
    w = np.asarray(weights, dtype=np.float64)
    nz = np.flatnonzero(w)
    if nz.size == 0:
        return np.zeros(echo_train.n_echoes)
    cols = epg_dictionary(echo_train, grid.values[nz])
    return cols @ w[nz]
