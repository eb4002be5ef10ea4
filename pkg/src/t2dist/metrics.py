"""Distribution distances, myelin water fraction and model comparison."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .core import T2Distribution, T2Grid, inference_grid
from .errors import ParameterError

MWF_WINDOW_MS = (10.0, 40.0)
NORM_TOL = 1e-6

SNR_SWEEP = (10, 20, 30, 40, 80, 150, 200, 400, 1000)


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(p, T2Distribution) or isinstance(q, T2Distribution):
        if not (isinstance(p, T2Distribution) and isinstance(q, T2Distribution)):
            raise ParameterError("cannot compare a distribution with a bare array")
        if p.grid != q.grid:
            raise ParameterError("distributions live on different grids")
        return p.weights, q.weights
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ParameterError(f"shape mismatch {p.shape} vs {q.shape}")
    return p, q


def mse(p, q):
    """Mean squared difference of bin masses (over the last axis for arrays)."""
    p, q = _pair(p, q)
    out = np.mean((p - q) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def wasserstein1(p, q):
    """1D earth mover's distance with bins at positions ``k / (n - 1)``.

    Equals the summed absolute CDF difference times the bin spacing.
    """
    p, q = _pair(p, q)
    for name, a in (("p", p), ("q", q)):
        if np.any(np.abs(a.sum(axis=-1) - 1.0) > NORM_TOL):
            raise ParameterError(f"{name} is not normalised to unit mass")
    n = p.shape[-1]
    cdf_diff = np.cumsum(p - q, axis=-1)[..., :-1]
    out = np.abs(cdf_diff).sum(axis=-1) / (n - 1)
    return float(out) if out.ndim == 0 else out


def mwf_mask(grid: T2Grid, window=MWF_WINDOW_MS) -> np.ndarray:
    lo, hi = window
    return (grid.values >= lo) & (grid.values <= hi)


def mwf(p, grid: T2Grid | None = None):
    """Myelin water fraction: mass between 10 and 40 ms, both ends inclusive."""
    if isinstance(p, T2Distribution):
        return float(p.weights[mwf_mask(p.grid)].sum())
    grid = grid or inference_grid()
    out = np.asarray(p, dtype=np.float64)[..., mwf_mask(grid)].sum(axis=-1)
    return float(out) if out.ndim == 0 else out


# -- paired one-sided t-test ------------------------------------------------


def _betacf(a: float, b: float, x: float, max_iter: int = 100000, eps: float = 1e-16) -> float:
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta function I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper tail P(T >= t) of Student's t with `df` degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    x = df / (df + t * t)
    tail = 0.5 * betainc_reg(0.5 * df, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    n: int
    degenerate: bool = False

    def __iter__(self):
        return iter((self.t_statistic, self.p_value))


def paired_t_test_one_sided(errors_a, errors_b) -> TTestResult:
    """Paired test of H1: mean(a - b) > 0, i.e. `b` has lower error than `a`."""
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ParameterError("paired samples must be 1D arrays of equal length")
    n = a.size
    if n < 2:
        raise ParameterError("a paired t-test needs at least two pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if not sd > 0:
        return TTestResult(float("nan"), float("nan"), n, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), student_t_sf(float(t), n - 1), n)


# -- evaluation ---------------------------------------------------------------


def _summary(x: Sequence[float]) -> dict:
    a = np.asarray(x, dtype=np.float64)
    if a.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "q1": float("nan"),
                "median": float("nan"), "q3": float("nan")}
    q1, med, q3 = np.percentile(a, [25, 50, 75])
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1) if a.size > 1 else 0.0),
            "q1": float(q1), "median": float(med), "q3": float(q3)}


@dataclass
class EvalRecord:
    model_id: str
    condition: dict
    mse: list[float] = field(default_factory=list)
    w1: list[float] = field(default_factory=list)
    mwf_error: list[float] = field(default_factory=list)

    @property
    def summary(self) -> dict:
        return {"mse": _summary(self.mse), "w1": _summary(self.w1),
                "mwf_error": _summary(self.mwf_error)}

    def to_json(self) -> str:
        d = asdict(self)
        d["summary"] = self.summary
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "EvalRecord":
        d = json.loads(line)
        d.pop("summary", None)
        return cls(**d)


class Predictor(Protocol):
    n_echoes: int

    def predict(self, signals: np.ndarray, echo_times_ms: np.ndarray,
                flip_angles: np.ndarray) -> np.ndarray: ...


def score(pred: np.ndarray, ref: np.ndarray, grid: T2Grid | None = None) -> dict:
    """Per-sample MSE, W1 and absolute MWF error of ``(n, n_bins)`` arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    ref = ref / ref.sum(axis=-1, keepdims=True)
    return {
        "mse": mse(pred, ref),
        "w1": wasserstein1(pred, ref),
        "mwf_error": np.abs(mwf(pred, grid) - mwf(ref, grid)),
    }


def evaluate(
    predictors: Mapping[str, Predictor],
    testset,
    conditions: Sequence[float] = SNR_SWEEP,
    seed: int = 0,
    condition_extra: dict | None = None,
) -> list[EvalRecord]:
    """Score every predictor on `testset` re-noised at each SNR in `conditions`.

    `testset` holds noiseless, first-echo-normalised signals. Each condition
    draws its noise from its own seeded stream, shared by all predictors so
    that per-sample errors are paired.
    """
    from .phantom import rician_noise_array

    n_echoes = testset.n_echoes
    for name, pr in predictors.items():
        if getattr(pr, "n_echoes", n_echoes) != n_echoes:
            raise ParameterError(
                f"predictor {name!r} expects {pr.n_echoes} echoes, test set has {n_echoes}"
            )
    clean = np.asarray(testset.signals, dtype=np.float64)
    te = testset.echo_times_ms
    records = []
    for ci, snr in enumerate(conditions):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ci,)))
        noisy = rician_noise_array(clean, float(snr), rng)
        noisy = noisy / noisy[:, :1]
        cond = {"snr": float(snr)}
        if condition_extra:
            cond.update(condition_extra)
        for name, pr in predictors.items():
            pred = pr.predict(noisy, te, testset.alpha)
            s = score(pred, testset.refs, testset.grid)
            records.append(EvalRecord(name, dict(cond), s["mse"].tolist(),
                                      s["w1"].tolist(), s["mwf_error"].tolist()))
    return records


def compare(records: Sequence[EvalRecord], baseline: str, candidate: str,
            metric: str = "mse") -> list[dict]:
    """One-sided paired tests per condition: is `candidate` better than `baseline`?"""
    by_cond: dict[str, dict[str, EvalRecord]] = {}
    for r in records:
        by_cond.setdefault(json.dumps(r.condition, sort_keys=True), {})[r.model_id] = r
    rows = []
    for key, recs in by_cond.items():
        if baseline not in recs or candidate not in recs:
            continue
        a = getattr(recs[baseline], metric)
        b = getattr(recs[candidate], metric)
        res = paired_t_test_one_sided(a, b)
        rows.append({**json.loads(key), "metric": metric, "baseline": baseline,
                     "candidate": candidate, "baseline_mean": float(np.mean(a)),
                     "candidate_mean": float(np.mean(b)), "t": res.t_statistic,
                     "p_value": res.p_value, "degenerate": res.degenerate})
    return rows


def records_to_csv(records: Sequence[EvalRecord], path) -> None:
    """Flat per-(model, condition) summary table for plotting."""
    import csv

    cond_keys = sorted({k for r in records for k in r.condition})
    header = ["model_id", *cond_keys, "n"]
    for m in ("mse", "w1", "mwf_error"):
        header += [f"{m}_{s}" for s in ("mean", "std", "q1", "median", "q3")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in records:
            summ = r.summary
            row = [r.model_id, *[r.condition.get(k, "") for k in cond_keys], len(r.mse)]
            for m in ("mse", "w1", "mwf_error"):
                row += [repr(summ[m][s]) for s in ("mean", "std", "q1", "median", "q3")]
            w.writerow(row)
