"""Non-negative least squares with optional Tikhonov / Laplacian penalty.

The solver is Lawson-Hanson; regularisation is handled by stacking the
penalty rows under the data rows. The penalty weight can be picked
automatically so that the data misfit grows by a fixed factor over the
unregularised fit.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import _backend
from .core import T2Grid
from .epg import DecayMatrix
from .errors import ConvergenceError, ParameterError

log = logging.getLogger(__name__)

DUAL_TOL = 1e-10
KKT_TOL = 1e-8
LAMBDA_MIN = 1e-8
LAMBDA_MAX = 1e4

RegKind = Literal["none", "identity", "laplacian"]


@dataclass(frozen=True)
class RegularizerKind:
    kind: RegKind = "laplacian"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "identity", "laplacian"):
            raise ParameterError(f"unknown regulariser {self.kind!r}")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ParameterError(f"lambda must be non-negative, got {self.lam}")

    def with_lambda(self, lam: float) -> "RegularizerKind":
        return RegularizerKind(self.kind, float(lam))


def penalty_matrix(kind: RegKind, n: int) -> np.ndarray:
    """Identity, or the ``(n-2, n)`` second-difference operator with rows (1, -2, 1)."""
    if kind == "identity":
        return np.eye(n)
    if kind == "laplacian":
        if n < 3:
            raise ParameterError("a second-difference penalty needs at least 3 unknowns")
        L = np.zeros((n - 2, n))
        i = np.arange(n - 2)
        L[i, i] = 1.0
        L[i, i + 1] = -2.0
        L[i, i + 2] = 1.0
        return L
    if kind == "none":
        return np.zeros((0, n))
    raise ParameterError(f"unknown regulariser {kind!r}")


def _scale(A: np.ndarray, b: np.ndarray) -> float:
    return max(1.0, float(np.linalg.norm(A)) * float(np.linalg.norm(b)))


def _validate(A, b) -> tuple[np.ndarray, np.ndarray]:
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise ParameterError(f"A must be a non-empty matrix, got shape {A.shape}")
    if b.shape != (A.shape[0],):
        raise ParameterError(f"b shape {b.shape} does not match A rows {A.shape[0]}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise ParameterError("NNLS inputs must be finite")
    return A, b


def kkt_violation(A, b, x) -> float:
    """Largest KKT violation of `x`, relative to ``max(1, ||A|| ||b||)``.

    Checks primal feasibility, ``w_j <= 0`` on the zero set and ``w_j = 0``
    on the support, where ``w = A^T (b - A x)``.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w = A.T @ (b - A @ x)
    pos = x > 0
    worst = max(
        float(-x.min(initial=0.0)),
        float(w[~pos].max(initial=0.0)),
        float(np.abs(w[pos]).max(initial=0.0)),
    )
    return worst / _scale(A, b)


def nnls(A, b) -> tuple[np.ndarray, float]:
    """Solve ``min ||Ax - b||_2`` subject to ``x >= 0``.

    Parameters
    ----------
    A : array_like, shape (m, n)
    b : array_like, shape (m,)

    Returns
    -------
    x : ndarray, shape (n,)
    residual_norm : float

    Raises
    ------
    ParameterError
        Non-finite or mis-shaped input.
    ConvergenceError
        More than ``3 n`` outer iterations, or the returned point fails the
        KKT check.
    """
    A, b = _validate(A, b)
    n = A.shape[1]
    tol = DUAL_TOL * _scale(A, b)
    x, rnorm, it = _backend.nnls(A, b, 3 * n, tol)
    x = np.asarray(x)
    if it < 0:
        raise ConvergenceError(f"Lawson-Hanson exceeded {3 * n} outer iterations")
    viol = kkt_violation(A, b, x)
    if viol > KKT_TOL:
        raise ConvergenceError(f"NNLS solution fails the KKT check (violation {viol:.3g})")
    return x, float(rnorm)


def regularized_nnls(A, b, reg: RegularizerKind) -> tuple[np.ndarray, float, float]:
    """Solve ``min ||Ax - b||^2 + lam ||Lx||^2`` with ``x >= 0``.

    Returns ``(x, residual_norm, chi2)``, both misfit values computed on the
    data rows only.
    """
    A, b = _validate(A, b)
    if reg.kind == "none" or reg.lam == 0.0:
        x, rnorm = nnls(A, b)
        return x, rnorm, rnorm * rnorm
    L = penalty_matrix(reg.kind, A.shape[1])
    aug_A = np.vstack([A, np.sqrt(reg.lam) * L])
    aug_b = np.concatenate([b, np.zeros(L.shape[0])])
    x, _ = nnls(aug_A, aug_b)
    r = A @ x - b
    chi2 = float(r @ r)
    return x, float(np.sqrt(chi2)), chi2


@dataclass
class LambdaSelection:
    lam: float
    x: np.ndarray
    chi2: float
    chi2_min: float
    status: Literal["converged", "lower-bound", "upper-bound"]
    # evaluated (lambda, chi2) pairs in evaluation order
    trajectory: list[tuple[float, float]] = field(default_factory=list)

    def __iter__(self):
        # allows ``lam, x = select_lambda_chi2(...)``
        return iter((self.lam, self.x))


def select_lambda_chi2(
    A,
    b,
    reg_kind: RegKind = "laplacian",
    chi2_factor: float = 1.02,
    lam_bounds: tuple[float, float] = (LAMBDA_MIN, LAMBDA_MAX),
    rel_tol: float = 0.01,
    max_iter: int = 60,
) -> LambdaSelection:
    """Pick the penalty weight whose misfit equals ``chi2_factor * chi2(0)``.

    Bisection runs on ``log(lambda)`` inside `lam_bounds`. The returned
    solution always satisfies ``chi2 <= chi2_factor * chi2(0)`` (the lower
    side of the final bracket). When the target lies outside the bracket the
    corresponding bound is returned with a non-converged status and a
    warning is logged.
    """
    if not chi2_factor >= 1:
        raise ParameterError(f"chi2_factor must be >= 1, got {chi2_factor}")
    if reg_kind == "none":
        raise ParameterError("lambda selection needs a penalty (identity or laplacian)")
    A, b = _validate(A, b)
    lo, hi = lam_bounds
    if not (0 < lo < hi):
        raise ParameterError(f"invalid lambda bounds {lam_bounds}")

    _, r0 = nnls(A, b)
    chi2_0 = r0 * r0
    target = chi2_factor * chi2_0
    # round-off floor so that exact fits (chi2 = 0) are not read as overshoot
    slack = 1e-14 * float(b @ b)
    traj: list[tuple[float, float]] = []

    def solve(lam):
        x, _, chi2 = regularized_nnls(A, b, RegularizerKind(reg_kind, lam))
        traj.append((lam, chi2))
        return x, chi2

    x_lo, c_lo = solve(lo)
    if c_lo > target + slack:
        if chi2_factor > 1:
            log.warning("chi2 target already exceeded at lambda=%g", lo)
        return LambdaSelection(lo, x_lo, c_lo, chi2_0, "lower-bound", traj)
    x_hi, c_hi = solve(hi)
    if c_hi <= target + slack:
        log.warning("chi2 target unreachable below lambda=%g; returning the bound", hi)
        return LambdaSelection(hi, x_hi, c_hi, chi2_0, "upper-bound", traj)

    llo, lhi = np.log(lo), np.log(hi)
    status = "converged"
    for _ in range(max_iter):
        if abs(c_lo - target) <= rel_tol * target:
            break
        lmid = 0.5 * (llo + lhi)
        x_mid, c_mid = solve(float(np.exp(lmid)))
        if c_mid <= target:
            llo, x_lo, c_lo = lmid, x_mid, c_mid
        else:
            lhi, c_hi = lmid, c_mid
        if lhi - llo < 1e-12:
            break
    return LambdaSelection(float(np.exp(llo)), x_lo, c_lo, chi2_0, status, traj)


@dataclass
class VolumeFit:
    """Per-voxel NNLS results; arrays share the leading voxel shape."""

    grid: T2Grid
    distributions: np.ndarray  # (..., n_t2), unit mass where fit succeeded
    scale: np.ndarray  # raw solution mass before normalisation
    lambdas: np.ndarray
    chi2: np.ndarray
    failed: np.ndarray  # bool


def fit_volume(
    dictionary: DecayMatrix,
    signals,
    reg: RegularizerKind = RegularizerKind("laplacian", 0.0),
    lambda_policy: Literal["fixed", "auto"] = "fixed",
    chi2_factor: float = 1.02,
    threads: int = 1,
) -> VolumeFit:
    """Fit every voxel of a ``(..., n_echoes)`` signal stack.

    Failures (zero signals, solver errors) are flagged in ``failed`` and
    leave a zero distribution; they do not abort the batch.
    """
    signals = np.asarray(signals, dtype=np.float64)
    n_echoes = dictionary.echo_train.n_echoes
    if signals.shape[-1] != n_echoes:
        raise ParameterError(
            f"signals have {signals.shape[-1]} echoes, dictionary has {n_echoes}"
        )
    if lambda_policy not in ("fixed", "auto"):
        raise ParameterError(f"unknown lambda policy {lambda_policy!r}")
    lead = signals.shape[:-1]
    flat = signals.reshape(-1, n_echoes)
    n_vox, n_t2 = flat.shape[0], len(dictionary.grid)
    A = dictionary.entries

    def one(i):
        b = flat[i]
        if not np.all(np.isfinite(b)) or not np.any(b):
            return None
        try:
            if lambda_policy == "auto":
                sel = select_lambda_chi2(A, b, reg.kind, chi2_factor)
                x, lam, chi2 = sel.x, sel.lam, sel.chi2
            else:
                x, _, chi2 = regularized_nnls(A, b, reg)
                lam = reg.lam
        except (ConvergenceError, ParameterError) as exc:
            log.debug("voxel %d failed: %s", i, exc)
            return None
        return x, lam, chi2

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(n_vox)))
    else:
        results = [one(i) for i in range(n_vox)]

    dist = np.zeros((n_vox, n_t2))
    scale = np.zeros(n_vox)
    lambdas = np.full(n_vox, np.nan)
    chi2s = np.full(n_vox, np.nan)
    failed = np.zeros(n_vox, dtype=bool)
    for i, res in enumerate(results):
        if res is None:
            failed[i] = True
            continue
        x, lam, chi2 = res
        total = x.sum()
        if not total > 0:
            failed[i] = True
            continue
        dist[i] = x / total
        scale[i] = total
        lambdas[i] = lam
        chi2s[i] = chi2
    return VolumeFit(
        dictionary.grid,
        dist.reshape(*lead, n_t2),
        scale.reshape(lead),
        lambdas.reshape(lead),
        chi2s.reshape(lead),
        failed.reshape(lead),
    )
