"""Desk-scale versions of the four evaluation protocols.

Each preset names the training sets, the models trained on them, a
noiseless test set and the comparisons to run. Datasets and checkpoints are
cached under a content hash of everything that determines them, so presets
that share a training set (the varied-TE P2T2-FC model is used three times)
train it once.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContainerError, ParameterError
from .metrics import SNR_SWEEP, EvalRecord, compare, evaluate, mwf, paired_t_test_one_sided
from .nn import Checkpoint, ModelSpec, NetworkPredictor, TrainConfig, train
from .phantom import (
    Dataset,
    SimConfig,
    generate_1d_dataset,
    generate_brain_phantom,
    synthetic_segmentation,
)

log = logging.getLogger(__name__)

PRESET_NAMES = ("fixed-te", "varied-te", "unseen-te", "brain")


@dataclass
class ExperimentConfig:
    """Knobs shared by every preset; the defaults are the desk-scale values."""

    n_train: int = 50_000
    n_test: int = 5_000
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 256
    loss_lambda_w: float = 0.1
    seed: int = 0
    threads: int = 1
    hidden_width: int = 256
    phantom_shape: tuple[int, int] = (64, 64)
    phantom_snr: float = 80.0

    def validate(self) -> None:
        if self.n_train < 10 or self.n_test < 2 or self.epochs < 1:
            raise ParameterError("n_train >= 10, n_test >= 2 and epochs >= 1 are required")

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                           batch_size=self.batch_size, loss_lambda_w=self.loss_lambda_w,
                           seed=self.seed)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# Offsets keep the streams of different datasets apart while letting the
# same (role, seed) pair hit the cache from any preset.
_DATA_OFFSETS = {"fixed12": 101, "fixed10": 102, "varied": 103, "te10-11": 104,
                 "test-fixed12": 201, "test-varied": 202, "test-te12-15": 203}


def training_sim(role: str, cfg: ExperimentConfig) -> SimConfig:
    seed = cfg.seed * 1000 + _DATA_OFFSETS[role]
    n = cfg.n_train
    if role == "fixed12":
        return SimConfig(n_samples=n, fixed_te=12.0, seed=seed)
    if role == "fixed10":
        return SimConfig(n_samples=n, fixed_te=10.0, seed=seed)
    if role == "varied":
        return SimConfig(n_samples=n, te_range=(5.0, 15.0), seed=seed)
    if role == "te10-11":
        return SimConfig(n_samples=n, te_range=(10.0, 11.0), seed=seed)
    raise ParameterError(f"unknown training set {role!r}")


def test_sim(role: str, cfg: ExperimentConfig) -> SimConfig:
    seed = cfg.seed * 1000 + _DATA_OFFSETS[role]
    inf = float("inf")
    if role == "test-fixed12":
        return SimConfig(n_samples=cfg.n_test, fixed_te=12.0, fixed_snr=inf, seed=seed)
    if role == "test-varied":
        return SimConfig(n_samples=cfg.n_test, te_range=(5.0, 15.0), fixed_snr=inf, seed=seed)
    if role == "test-te12-15":
        return SimConfig(n_samples=cfg.n_test, te_range=(12.0, 15.0), fixed_snr=inf, seed=seed)
    raise ParameterError(f"unknown test set {role!r}")


test_sim.__test__ = False  # not a pytest test despite the name


@dataclass(frozen=True)
class Preset:
    name: str
    models: tuple[tuple[str, str, str], ...]  # (model id, kind, training set)
    test_set: str | None
    comparisons: tuple[tuple[str, str], ...]  # (baseline, candidate)
    conditions: tuple[float, ...] = SNR_SWEEP


PRESETS = {
    "fixed-te": Preset(
        "fixed-te",
        (("MIML_fix", "miml", "fixed12"), ("P2T2-FC", "p2t2-fc", "varied")),
        "test-fixed12",
        (("MIML_fix", "P2T2-FC"),),
    ),
    "varied-te": Preset(
        "varied-te",
        (("MIML_var", "miml", "varied"), ("P2T2-FC", "p2t2-fc", "varied")),
        "test-varied",
        (("MIML_var", "P2T2-FC"),),
    ),
    "unseen-te": Preset(
        "unseen-te",
        (("MIML_fix", "miml", "fixed10"), ("MIML_var", "miml", "te10-11"),
         ("P2T2-FC", "p2t2-fc", "te10-11"), ("P2T2-ConvFC", "p2t2-convfc", "te10-11")),
        "test-te12-15",
        (("MIML_var", "P2T2-FC"), ("MIML_var", "P2T2-ConvFC"), ("MIML_fix", "P2T2-FC")),
    ),
    "brain": Preset("brain", (("P2T2-FC", "p2t2-fc", "varied"),), None, ()),
}


def _as_stored(ds: Dataset) -> Dataset:
    """Round columns to the container precision, so that a run gives the same
    checkpoints whether or not its datasets went through disk."""
    f32 = [np.asarray(getattr(ds, k), dtype="<f4") for k in ("signals", "refs", "delta_te", "alpha", "snr")]
    return Dataset(*f32, ds.combo, ds.grid, ds.t1, labels=ds.labels, shape=ds.shape, meta=ds.meta)


class ArtifactCache:
    """Datasets and checkpoints addressed by a hash of their full recipe.

    With ``root=None`` everything lives in memory for the life of the object.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, object] = {}
        # wall-clock training time per checkpoint key; kept out of the
        # checkpoint so that identical runs produce identical files
        self.train_seconds: dict[str, float] = {}

    def dataset(self, sim: SimConfig, threads: int = 1) -> Dataset:
        key = "data-" + _hash(sim.to_dict())
        if key in self._mem:
            return self._mem[key]  # type: ignore[return-value]
        from .io import read_dataset, write_dataset

        ds = None
        if self.root is not None and (self.root / key).is_dir():
            try:
                ds = read_dataset(self.root / key)
            except ContainerError as exc:
                log.warning("discarding cached dataset %s: %s", key, exc)
        if ds is None:
            ds = generate_1d_dataset(sim, threads=threads)
            if self.root is not None:
                write_dataset(ds, self.root / key)
                ds = read_dataset(self.root / key)
            else:
                ds = _as_stored(ds)
        self._mem[key] = ds
        return ds

    def checkpoint(self, spec: ModelSpec, sim: SimConfig, tcfg: TrainConfig,
                   threads: int = 1) -> Checkpoint:
        key = "ckpt-" + _hash({"spec": asdict(spec), "data": sim.to_dict(), "train": asdict(tcfg)})
        if key in self._mem:
            return self._mem[key]  # type: ignore[return-value]
        from .io import load_checkpoint, save_checkpoint

        ck = None
        path = self.root / f"{key}.ckpt" if self.root is not None else None
        if path is not None and path.is_file():
            try:
                ck = load_checkpoint(path, expect=spec)
            except ContainerError as exc:
                log.warning("discarding cached checkpoint %s: %s", key, exc)
        if ck is None:
            ds = self.dataset(sim, threads)
            t0 = time.perf_counter()
            ck = train(spec, ds, tcfg)
            self.train_seconds[key] = time.perf_counter() - t0
            ck.metadata["dataset_config"] = sim.to_dict()
            if path is not None:
                save_checkpoint(ck, path)
        self._mem[key] = ck
        return ck


@dataclass
class ExperimentResult:
    name: str
    config: dict
    records: list[EvalRecord] = field(default_factory=list)
    comparisons: list[dict] = field(default_factory=list)
    pooled: list[dict] = field(default_factory=list)
    checkpoints: dict[str, Checkpoint] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def mean(self, model_id: str, metric: str = "mse") -> float:
        vals = [v for r in self.records if r.model_id == model_id for v in getattr(r, metric)]
        return float(np.mean(vals))

    def comparison(self, baseline: str, candidate: str, **condition) -> dict:
        for row in self.comparisons:
            if (row["baseline"], row["candidate"]) == (baseline, candidate) and all(
                row.get(k) == v for k, v in condition.items()
            ):
                return row
        raise KeyError((baseline, candidate, condition))

    def pooled_comparison(self, baseline: str, candidate: str) -> dict:
        for row in self.pooled:
            if (row["baseline"], row["candidate"]) == (baseline, candidate):
                return row
        raise KeyError((baseline, candidate))


def _pooled(records: list[EvalRecord], baseline: str, candidate: str, metric: str) -> dict:
    """One paired test over every (sample, condition) pair."""
    a = np.concatenate([getattr(r, metric) for r in records if r.model_id == baseline])
    b = np.concatenate([getattr(r, metric) for r in records if r.model_id == candidate])
    res = paired_t_test_one_sided(a, b)
    return {"metric": metric, "baseline": baseline, "candidate": candidate,
            "baseline_mean": float(a.mean()), "candidate_mean": float(b.mean()),
            "relative_reduction": float(1.0 - b.mean() / a.mean()),
            "t": res.t_statistic, "p_value": res.p_value, "n": res.n}


def run_experiment(name: str, cfg: ExperimentConfig | None = None,
                   cache: ArtifactCache | None = None) -> ExperimentResult:
    """Train (or fetch) the preset's models and score them."""
    if name not in PRESETS:
        raise ParameterError(f"unknown experiment {name!r}; choose from {PRESET_NAMES}")
    cfg = cfg or ExperimentConfig()
    cfg.validate()
    cache = cache or ArtifactCache()
    preset = PRESETS[name]
    tcfg = cfg.train_config()
    result = ExperimentResult(name, {"experiment": name, **asdict(cfg)})

    predictors = {}
    for model_id, kind, role in preset.models:
        spec = ModelSpec(kind, hidden_width=cfg.hidden_width)
        ck = cache.checkpoint(spec, training_sim(role, cfg), tcfg, cfg.threads)
        result.checkpoints[model_id] = ck
        predictors[model_id] = NetworkPredictor(ck)
        log.info("%s: %s ready (best epoch %s)", name, model_id, ck.metadata.get("epoch"))

    if preset.test_set is not None:
        tsim = test_sim(preset.test_set, cfg)
        result.config["test_set"] = tsim.to_dict()
        result.config["training_sets"] = {m: training_sim(r, cfg).to_dict() for m, _, r in preset.models}
        test = cache.dataset(tsim, cfg.threads)
        result.records = evaluate(predictors, test, preset.conditions, seed=cfg.seed,
                                  condition_extra={"experiment": name})
        for base, cand in preset.comparisons:
            for metric in ("mse", "w1"):
                result.comparisons += compare(result.records, base, cand, metric)
                result.pooled.append(_pooled(result.records, base, cand, metric))
    else:
        result.extra.update(_brain(predictors["P2T2-FC"], cfg))
    return result


def _brain(predictor: NetworkPredictor, cfg: ExperimentConfig) -> dict:
    seg = synthetic_segmentation(cfg.phantom_shape, seed=cfg.seed)
    ph = generate_brain_phantom(seg, snr=cfg.phantom_snr, seed=cfg.seed)
    fg = ph.mask
    t0 = time.perf_counter()
    pred = predictor.predict(ph.noisy[fg], ph.echo_train.echo_times, None)
    seconds = time.perf_counter() - t0
    mwf_pred = np.zeros(ph.shape)
    mwf_pred[fg] = mwf(pred, ph.grid)
    mwf_ref = mwf(ph.refs)
    err = np.abs(mwf_pred - mwf_ref)[fg]
    return {
        "phantom": ph,
        "mwf_pred": mwf_pred,
        "mwf_ref": mwf_ref,
        "mwf_mae": float(err.mean()),
        "ref_mass_error": float(np.abs(ph.refs[fg].sum(axis=1) - 1).max()),
        "inference_seconds": seconds,
    }


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
