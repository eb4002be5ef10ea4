"""Synthetic ground truth: Gaussian-mixture T2 distributions, 1D training
sets, segmentation-driven 2D brain phantoms and Rician noise.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import ndtr

from .core import (
    EchoTrain,
    MultiEchoSignal,
    T2Distribution,
    T2Grid,
    dense_grid,
    downsample_masses,
    inference_grid,
)
from .epg import epg_dictionary, forward_sparse
from .errors import ParameterError


@dataclass(frozen=True)
class WaterPool:
    name: str
    mu_range: tuple[float, float]
    sigma_range: tuple[float, float]


POOLS = {
    "Myelin": WaterPool("Myelin", (15.0, 30.0), (0.1, 5.0)),
    "IES": WaterPool("IES", (50.0, 120.0), (0.1, 12.0)),
    "GM": WaterPool("GM", (60.0, 300.0), (0.1, 12.0)),
    "Pathology": WaterPool("Pathology", (300.0, 1000.0), (0.1, 5.0)),
    "CSF": WaterPool("CSF", (1000.0, 2000.0), (0.1, 5.0)),
}


@dataclass(frozen=True)
class TissueCombo:
    name: str
    pools: tuple[str, ...]


COMBOS = (
    TissueCombo("WM", ("Myelin", "IES")),
    TissueCombo("GM", ("Myelin", "GM")),
    TissueCombo("CSF", ("CSF",)),
    TissueCombo("WM+GM", ("Myelin", "IES", "GM")),
    TissueCombo("WM+CSF", ("Myelin", "IES", "CSF")),
    TissueCombo("GM+CSF", ("Myelin", "GM", "CSF")),
    TissueCombo("Pathology", ("Pathology",)),
)
COMBO_BY_NAME = {c.name: c for c in COMBOS}

# Gaussian tails beyond this many sigmas are dropped (mass < 1e-23)
TAIL_SIGMAS = 10.0


# -- mixtures -----------------------------------------------------------------


def gaussian_bin_masses(mu, sigma, t2_values, bin_width: float = 1.0) -> np.ndarray:
    """Mass of N(mu, sigma) falling in bins of `bin_width` centred on `t2_values`.

    `mu` and `sigma` broadcast against each other; the result has the
    grid as its last axis. Integrating over bins rather than sampling the
    density keeps narrow components (sigma well below the bin width) at
    their intended mass.
    """
    mu = np.asarray(mu, dtype=np.float64)[..., None]
    sigma = np.asarray(sigma, dtype=np.float64)[..., None]
    t = np.asarray(t2_values, dtype=np.float64)
    half = 0.5 * bin_width
    m = ndtr((t + half - mu) / sigma) - ndtr((t - half - mu) / sigma)
    m[np.abs(t - mu) > TAIL_SIGMAS * sigma + half] = 0.0
    return np.maximum(m, 0.0)


@dataclass(frozen=True)
class MixtureParams:
    combo: TissueCombo
    fractions: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def masses(self, grid: T2Grid) -> np.ndarray:
        comp = gaussian_bin_masses(self.mu, self.sigma, grid.values)
        return self.fractions @ comp

    def evaluate(self, grid: T2Grid) -> T2Distribution:
        return T2Distribution.from_masses(grid, self.masses(grid))


def draw_mixture(combo: TissueCombo, rng: np.random.Generator) -> MixtureParams:
    """Flat-Dirichlet fractions and uniform per-pool mean / width draws."""
    k = len(combo.pools)
    fractions = rng.dirichlet(np.ones(k)) if k > 1 else np.ones(1)
    mu = np.empty(k)
    sigma = np.empty(k)
    for i, name in enumerate(combo.pools):
        pool = POOLS[name]
        mu[i] = rng.uniform(*pool.mu_range)
        sigma[i] = rng.uniform(*pool.sigma_range)
    return MixtureParams(combo, fractions, mu, sigma)


def sample_mixture(combo: TissueCombo, rng: np.random.Generator,
                   grid: T2Grid | None = None) -> T2Distribution:
    return draw_mixture(combo, rng).evaluate(grid or dense_grid())


# -- noise ------------------------------------------------------------------


def rician_noise_array(signals, snr: float, rng: np.random.Generator,
                       reference=None) -> np.ndarray:
    """Magnitude of the signal plus complex Gaussian noise, over the last axis.

    The noise standard deviation is ``reference / snr`` where `reference`
    defaults to each signal's own first echo. ``snr = inf`` returns a copy.
    """
    s = np.asarray(signals, dtype=np.float64)
    if not snr > 0:
        raise ParameterError(f"snr must be positive, got {snr}")
    if math.isinf(snr):
        return s.copy()
    ref = s[..., :1] if reference is None else np.asarray(reference, dtype=np.float64)
    sigma = ref / snr
    e1 = rng.standard_normal(s.shape)
    e2 = rng.standard_normal(s.shape)
    return np.hypot(s + sigma * e1, sigma * e2)


def add_rician_noise(signal: MultiEchoSignal, snr: float,
                     rng: np.random.Generator) -> MultiEchoSignal:
    """Rician-corrupt a noiseless signal at the given first-echo SNR."""
    return MultiEchoSignal(rician_noise_array(signal.values, snr, rng), signal.echo_train)


# -- 1D datasets --------------------------------------------------------------


@dataclass(frozen=True)
class Sample1D:
    signal: MultiEchoSignal
    reference: T2Distribution
    echo_train: EchoTrain
    combo: TissueCombo | None
    snr: float


@dataclass
class Dataset:
    """Columnar store of samples sharing an echo count and reference grid.

    ``signals`` are first-echo normalised; ``refs`` live on ``grid``.
    ``combo`` holds indices into :data:`COMBOS` (-1 when not applicable).
    Phantom datasets additionally carry ``labels`` and ``shape``.
    """

    signals: np.ndarray
    refs: np.ndarray
    delta_te: np.ndarray
    alpha: np.ndarray
    snr: np.ndarray
    combo: np.ndarray
    grid: T2Grid = field(default_factory=inference_grid)
    t1: float = 1000.0
    labels: np.ndarray | None = None
    shape: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.signals)
        for name in ("refs", "delta_te", "alpha", "snr", "combo"):
            if len(getattr(self, name)) != n:
                raise ParameterError(f"dataset column {name!r} has the wrong length")
        if np.asarray(self.refs).shape[1:] != (len(self.grid),):
            raise ParameterError("reference width does not match the grid")

    @property
    def n_echoes(self) -> int:
        return int(np.asarray(self.signals).shape[1])

    @property
    def echo_times_ms(self) -> np.ndarray:
        return np.asarray(self.delta_te, dtype=np.float64)[:, None] * np.arange(
            1, self.n_echoes + 1
        )

    def __len__(self) -> int:
        return len(self.signals)

    def __getitem__(self, i: int) -> Sample1D:
        train = EchoTrain(float(self.delta_te[i]), self.n_echoes, float(self.alpha[i]), self.t1)
        c = int(self.combo[i])
        return Sample1D(
            MultiEchoSignal(self.signals[i], train),
            T2Distribution.from_masses(self.grid, self.refs[i]),
            train,
            COMBOS[c] if c >= 0 else None,
            float(self.snr[i]),
        )

    def __iter__(self) -> Iterator[Sample1D]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.signals[idx], self.refs[idx], self.delta_te[idx],
                       self.alpha[idx], self.snr[idx], self.combo[idx],
                       self.grid, self.t1, meta=dict(self.meta))

    @classmethod
    def from_samples(cls, samples: Sequence[Sample1D], meta: dict | None = None) -> "Dataset":
        if not samples:
            raise ParameterError("cannot build a dataset from an empty sample list")
        n_echoes = {s.echo_train.n_echoes for s in samples}
        grids = {s.reference.grid for s in samples}
        t1s = {s.echo_train.t1 for s in samples}
        if len(n_echoes) != 1 or len(grids) != 1 or len(t1s) != 1:
            raise ParameterError("samples must share echo count, reference grid and T1")
        return cls(
            np.stack([s.signal.values for s in samples]),
            np.stack([s.reference.weights for s in samples]),
            np.array([s.echo_train.delta_te for s in samples]),
            np.array([s.echo_train.flip_angle for s in samples]),
            np.array([s.snr for s in samples]),
            np.array([COMBOS.index(s.combo) if s.combo else -1 for s in samples], dtype=np.int8),
            grids.pop(),
            t1s.pop(),
            meta=dict(meta or {}),
        )


@dataclass
class SimConfig:
    n_samples: int = 1000
    te_range: tuple[float, float] = (5.0, 15.0)
    alpha_range: tuple[float, float] = (90.0, 180.0)
    snr_range: tuple[float, float] = (80.0, 200.0)
    fixed_te: float | None = None
    fixed_alpha: float | None = None
    fixed_snr: float | None = None
    n_echoes: int = 20
    t1: float = 1000.0
    seed: int = 0

    def validate(self) -> None:
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ParameterError(f"n_samples must be >= 1, got {self.n_samples}")
        for name, (lo, hi) in (("te_range", self.te_range),
                               ("alpha_range", self.alpha_range),
                               ("snr_range", self.snr_range)):
            if not (0 < lo <= hi) or not np.isfinite(lo):
                raise ParameterError(f"invalid {name} {(lo, hi)}")
        alphas = [self.fixed_alpha] if self.fixed_alpha is not None else list(self.alpha_range)
        if any(not (90 <= a <= 180) for a in alphas):
            raise ParameterError("flip angles must lie in [90, 180] degrees")
        if self.fixed_te is not None and not self.fixed_te > 0:
            raise ParameterError("fixed_te must be positive")
        if self.fixed_snr is not None and not self.fixed_snr > 0:
            raise ParameterError("fixed_snr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one sample, fixed by (seed, index) alone."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _simulate_one(cfg: SimConfig, i: int, dense: T2Grid, target: T2Grid):
    rng = sample_rng(cfg.seed, i)
    combo_idx = i % len(COMBOS)
    dte = cfg.fixed_te if cfg.fixed_te is not None else rng.uniform(*cfg.te_range)
    alpha = cfg.fixed_alpha if cfg.fixed_alpha is not None else rng.uniform(*cfg.alpha_range)
    snr = cfg.fixed_snr if cfg.fixed_snr is not None else rng.uniform(*cfg.snr_range)
    mix = draw_mixture(COMBOS[combo_idx], rng)
    masses = mix.masses(dense)
    masses /= masses.sum()
    train = EchoTrain(dte, cfg.n_echoes, alpha, cfg.t1)
    clean = forward_sparse(train, dense, masses)
    noisy = rician_noise_array(clean, snr, rng)
    ref = downsample_masses(masses, dense, target)
    return noisy / noisy[0], ref / ref.sum(), dte, alpha, snr, combo_idx


def generate_1d_dataset(cfg: SimConfig, threads: int = 1) -> Dataset:
    """Simulate `cfg.n_samples` (signal, reference) pairs.

    Tissue combinations cycle through the seven combos, so every combo gets
    ``n_samples // 7`` or one more samples. Each sample draws from its own
    seeded stream, so output does not depend on `threads`.
    """
    cfg.validate()
    dense, target = dense_grid(), inference_grid()
    n = int(cfg.n_samples)

    def run(i):
        return _simulate_one(cfg, i, dense, target)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(run, range(n), chunksize=256))
    else:
        rows = [run(i) for i in range(n)]
    sig, ref, dte, alpha, snr, combo = zip(*rows)
    return Dataset(
        np.stack(sig), np.stack(ref), np.array(dte), np.array(alpha),
        np.array(snr), np.array(combo, dtype=np.int8), target, cfg.t1,
        meta={"generator": "1d", "config": cfg.to_dict()},
    )


# -- 2D brain phantoms ----------------------------------------------------------

BACKGROUND, WM, GM, CSF = 0, 1, 2, 3
TISSUES = {WM: "WM", GM: "GM", CSF: "CSF"}
PATCH = 8

# per tissue: (label in Table-1 pools, fraction rule)
TISSUE_POOLS = {
    WM: ("Myelin", "IES", "IES"),  # myelin, intra-axonal, extra-axonal
    GM: ("Myelin", "GM"),
    CSF: ("CSF",),
}


def _draw_patch_fractions(tissue: int, rng: np.random.Generator) -> np.ndarray:
    if tissue == WM:
        while True:
            vm = rng.uniform(0.0, 0.4)
            vis = rng.uniform(0.0, 0.6)
            if vm + vis <= 1.0:
                return np.array([vm, vis, 1.0 - vm - vis])
    if tissue == GM:
        vm = rng.uniform(0.0, 0.05)
        return np.array([vm, 1.0 - vm])
    return np.ones(1)


@dataclass
class PhantomVolume:
    shape: tuple[int, int]
    labels: np.ndarray
    mask: np.ndarray  # foreground voxels
    refs: np.ndarray  # (H, W, n_t2) on the inference grid
    clean: np.ndarray  # (H, W, n_echoes), unnormalised
    noisy: np.ndarray  # (H, W, n_echoes), first-echo normalised
    tissue_fractions: dict[str, np.ndarray]
    pool_fractions: dict[str, np.ndarray]
    echo_train: EchoTrain
    snr: float
    grid: T2Grid
    meta: dict = field(default_factory=dict)

    def to_dataset(self) -> Dataset:
        h, w = self.shape
        n = h * w
        sig = np.zeros((n, self.echo_train.n_echoes))
        fg = self.mask.ravel()
        sig[fg] = self.noisy.reshape(n, -1)[fg]
        return Dataset(
            sig, self.refs.reshape(n, -1), np.full(n, self.echo_train.delta_te),
            np.full(n, self.echo_train.flip_angle), np.full(n, float(self.snr)),
            np.full(n, -1, dtype=np.int8), self.grid, self.echo_train.t1,
            labels=self.labels.astype(np.uint8), shape=self.shape, meta=dict(self.meta),
        )


def generate_brain_phantom(
    seg,
    echo_train: EchoTrain | None = None,
    snr: float = 80.0,
    seed: int = 0,
) -> PhantomVolume:
    """Build a 2D phantom from a label image (0 background, 1 WM, 2 GM, 3 CSF).

    Tissue fractions are the Gaussian-smoothed (sigma 1) tissue masks,
    renormalised to sum to one on foreground voxels. Water-pool fractions and
    pool means/widths are drawn per 8x8 patch, and the fraction maps are then
    smoothed with sigma 3. Signals use a 12 ms / 20 echo train with a random
    refocusing angle unless `echo_train` is given.
    """
    seg = np.asarray(seg)
    if seg.ndim != 2 or not np.issubdtype(seg.dtype, np.integer):
        raise ParameterError("segmentation must be a 2D integer label image")
    bad = np.setdiff1d(np.unique(seg), [BACKGROUND, WM, GM, CSF])
    if bad.size:
        raise ParameterError(f"unknown label values {bad.tolist()}")
    rng = np.random.default_rng(seed)
    if echo_train is None:
        echo_train = EchoTrain(12.0, 20, float(rng.uniform(90.0, 180.0)))
    h, w = seg.shape
    mask = seg != BACKGROUND
    dense, target = dense_grid(), inference_grid()

    smoothed = {t: gaussian_filter((seg == t).astype(np.float64), 1.0) for t in TISSUES}
    total = sum(smoothed.values())
    vt = {t: np.where(mask, smoothed[t] / np.where(mask, total, 1.0), 0.0) for t in TISSUES}

    ph, pw = -(-h // PATCH), -(-w // PATCH)

    def upsample(a):
        return np.repeat(np.repeat(a, PATCH, axis=0), PATCH, axis=1)[:h, :w]

    dense_p = np.zeros((h * w, len(dense)))
    pool_maps: dict[str, np.ndarray] = {}
    for t, pools in TISSUE_POOLS.items():
        k = len(pools)
        fr = np.empty((ph, pw, k))
        mu = np.empty((ph, pw, k))
        sd = np.empty((ph, pw, k))
        for py in range(ph):
            for px in range(pw):
                fr[py, px] = _draw_patch_fractions(t, rng)
                for i, name in enumerate(pools):
                    mu[py, px, i] = rng.uniform(*POOLS[name].mu_range)
                    sd[py, px, i] = rng.uniform(*POOLS[name].sigma_range)
        for i in range(k):
            vi = gaussian_filter(upsample(fr[..., i]), 3.0)
            pool_maps[f"{TISSUES[t]}:{i}:{pools[i]}"] = vi
            weight = (vt[t] * vi).ravel()
            live = np.flatnonzero(weight > 0)
            if live.size == 0:
                continue
            comp = gaussian_bin_masses(upsample(mu[..., i]).ravel()[live],
                                       upsample(sd[..., i]).ravel()[live], dense.values)
            comp /= comp.sum(axis=1, keepdims=True)
            dense_p[live] += weight[live, None] * comp

    fg = mask.ravel()
    dense_p[fg] /= dense_p[fg].sum(axis=1, keepdims=True)
    refs = np.zeros((h * w, len(target)))
    r = downsample_masses(dense_p[fg], dense, target)
    refs[fg] = r / r.sum(axis=1, keepdims=True)

    D = epg_dictionary(echo_train, dense.values)
    clean = dense_p @ D.T
    noisy = np.zeros_like(clean)
    noisy[fg] = rician_noise_array(clean[fg], snr, rng)
    noisy[fg] /= noisy[fg, :1]

    return PhantomVolume(
        (h, w), seg.astype(np.uint8), mask, refs.reshape(h, w, -1),
        clean.reshape(h, w, -1), noisy.reshape(h, w, -1),
        {TISSUES[t]: v for t, v in vt.items()}, pool_maps, echo_train, float(snr), target,
        meta={"generator": "brain", "seed": seed, "snr": float(snr),
              "delta_te": echo_train.delta_te, "n_echoes": echo_train.n_echoes,
              "flip_angle": echo_train.flip_angle, "t1": echo_train.t1},
    )


def synthetic_segmentation(shape=(64, 64), seed: int = 0) -> np.ndarray:
    """Cartoon axial brain slice: CSF rim, cortical GM, WM core, ventricles
    and two deep GM nuclei, with a mildly wobbly outline.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    y, x = np.mgrid[0:h, 0:w]
    yc, xc = (y - (h - 1) / 2) / (0.46 * h), (x - (w - 1) / 2) / (0.40 * w)
    theta = np.arctan2(yc, xc)
    wobble = 1.0 + sum(0.03 * rng.uniform(-1, 1) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
                       for k in range(2, 6))
    rho = np.hypot(yc, xc) / wobble
    seg = np.zeros(shape, dtype=np.uint8)
    seg[rho <= 1.0] = CSF
    seg[rho <= 0.92] = GM
    seg[rho <= 0.72] = WM
    for sx in (-1, 1):
        vent = ((yc + 0.05) / 0.28) ** 2 + ((xc - sx * 0.13) / 0.09) ** 2 <= 1
        seg[vent] = CSF
        nuc = ((yc - 0.05) / 0.14) ** 2 + ((xc - sx * 0.38) / 0.1) ** 2 <= 1
        seg[nuc & (seg == WM)] = GM
    return seg
