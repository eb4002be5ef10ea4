"""``t2dist`` command line: simulate, train, infer, evaluate.

Every flag can also come from a JSON file given with ``--config``; flags on
the command line win. The fully resolved settings, including the seed, are
written into each artifact so a run can be repeated from the artifact alone.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContainerError, ParameterError, T2DistError

log = logging.getLogger("t2dist")

CONFIG_VERSION = 1

# defaults applied after merging the config file, so that "not given on the
# command line" can be told apart from "given with the default value"
DEFAULTS = {
    "seed": 0,
    "threads": None,
    "simulate_1d": {"n": 1000, "te": "5:15", "alpha": "90:180", "snr": "80:200", "echoes": 20,
                    "t1": 1000.0},
    "simulate_brain": {"seg": "synthetic", "shape": "64x64", "snr": 80.0, "te_fixed": 12.0,
                       "echoes": 20, "t1": 1000.0},
    "train": {"model": "p2t2-fc", "epochs": 50, "lr": 1e-4, "batch_size": 256, "lambda_w": 1.0,
              "val_fraction": 0.1, "hidden_width": 256, "dtype": "float32"},
    "infer": {"method": "network", "reg": "laplacian", "lam": "auto", "chi2_factor": 1.02,
              "mwf_format": "csv"},
    "evaluate": {"experiment": "fixed-te", "n_train": 50_000, "n_test": 5_000, "epochs": 50,
                 "lr": 1e-3, "batch_size": 256, "lambda_w": 0.1, "hidden_width": 256,
                 "phantom_snr": 80.0, "shape": "64x64"},
}


def _range(text: str, name: str) -> tuple[float, float]:
    try:
        parts = [float(v) for v in str(text).split(":")]
    except ValueError:
        raise ParameterError(f"--{name} expects LO:HI, got {text!r}") from None
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) != 2:
        raise ParameterError(f"--{name} expects LO:HI, got {text!r}")
    return parts[0], parts[1]


def _shape(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise ParameterError(f"shape must look like 64x64, got {text!r}") from None
    if h < 1 or w < 1:
        raise ParameterError(f"shape must be positive, got {text!r}")
    return h, w


# -- argument parsing ---------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON file with default values for any flag")
    p.add_argument("--seed", type=int, default=d, help="master seed (default 0)")
    p.add_argument("--threads", type=int, default=d, help="worker threads (default: all cores)")
    p.add_argument("--out", default=d, help="output path")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="t2dist", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"t2dist {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a 1D training set or a brain phantom")
    simsub = sim.add_subparsers(dest="target", required=True)

    s1 = simsub.add_parser("1d", help="Gaussian-mixture (signal, distribution) pairs")
    _global_flags(s1, suppress=True)
    s1.add_argument("--n", type=int)
    s1.add_argument("--te", help="echo spacing range LO:HI in ms")
    s1.add_argument("--te-fixed", type=float)
    s1.add_argument("--alpha", help="refocusing angle range LO:HI in degrees")
    s1.add_argument("--alpha-fixed", type=float)
    s1.add_argument("--snr", help="SNR range LO:HI")
    s1.add_argument("--snr-fixed", type=float)
    s1.add_argument("--echoes", type=int)
    s1.add_argument("--t1", type=float)

    sb = simsub.add_parser("brain", help="2D phantom from a segmentation")
    _global_flags(sb, suppress=True)
    sb.add_argument("--seg", help="'synthetic', a container with labels.u8, or a CSV label image")
    sb.add_argument("--shape", help="synthetic segmentation size, e.g. 64x64")
    sb.add_argument("--snr", type=float)
    sb.add_argument("--te-fixed", type=float)
    sb.add_argument("--alpha-fixed", type=float, help="refocusing angle (random when omitted)")
    sb.add_argument("--echoes", type=int)
    sb.add_argument("--t1", type=float)

    tr = sub.add_parser("train", help="train a network on a dataset container")
    _global_flags(tr, suppress=True)
    tr.add_argument("--model", help="miml, p2t2-fc or p2t2-convfc")
    tr.add_argument("--data")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lambda-w", type=float)
    tr.add_argument("--val-fraction", type=float)
    tr.add_argument("--hidden-width", type=int)
    tr.add_argument("--dtype", choices=("float32", "float64"))

    inf = sub.add_parser("infer", help="estimate distributions for a container")
    _global_flags(inf, suppress=True)
    inf.add_argument("--data")
    inf.add_argument("--checkpoint")
    inf.add_argument("--method", choices=("network", "nnls"))
    inf.add_argument("--reg", choices=("none", "identity", "laplacian"))
    inf.add_argument("--lambda", dest="lam", help="'auto' or a fixed value")
    inf.add_argument("--chi2-factor", type=float)
    inf.add_argument("--mwf", nargs="?", const="", default=None,
                     help="also export an MWF map (optionally to this path)")
    inf.add_argument("--mwf-format", choices=("csv", "pgm16"))

    ev = sub.add_parser("evaluate", help="run an experiment preset")
    _global_flags(ev, suppress=True)
    ev.add_argument("--experiment", choices=("fixed-te", "varied-te", "unseen-te", "brain"))
    ev.add_argument("--n-train", type=int)
    ev.add_argument("--n-test", type=int)
    ev.add_argument("--epochs", type=int)
    ev.add_argument("--lr", type=float)
    ev.add_argument("--batch-size", type=int)
    ev.add_argument("--lambda-w", type=float)
    ev.add_argument("--hidden-width", type=int)
    ev.add_argument("--phantom-snr", type=float)
    ev.add_argument("--shape")
    ev.add_argument("--cache", help="directory for cached datasets and checkpoints")
    return parser


def _section(args) -> str:
    return f"simulate_{args.target}" if args.command == "simulate" else args.command


def resolve(args: argparse.Namespace) -> dict:
    """Merge command line, config file and defaults into one flat dict."""
    file_cfg: dict = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ContainerError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ParameterError("config file must hold a JSON object")
        version = file_cfg.pop("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ParameterError(f"unsupported config_version {version}")
    section = _section(args)
    merged = {"seed": DEFAULTS["seed"], "threads": DEFAULTS["threads"], **DEFAULTS[section]}
    for k, v in file_cfg.items():
        if isinstance(v, dict):
            if k == section:
                merged.update(v)
            continue
        merged[k] = v
    for k, v in vars(args).items():
        if k in ("config", "verbose", "command", "target"):
            continue
        if v is not None:
            merged[k] = v
    if merged.get("threads") is None:
        merged["threads"] = os.cpu_count() or 1
    merged["command"] = args.command if args.command != "simulate" else f"simulate {args.target}"
    merged["config_version"] = CONFIG_VERSION
    return merged


def provenance(cfg: dict) -> dict:
    """Settings that determine an artifact's content (output path and thread
    count do not)."""
    return {k: v for k, v in cfg.items() if k not in ("out", "threads")}


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ParameterError(f"--{k.replace('_', '-')} is required")


# -- subcommands ------------------------------------------------------------------


def cmd_simulate_1d(cfg: dict) -> dict:
    from .io import write_dataset
    from .phantom import SimConfig, generate_1d_dataset

    _require(cfg, "out")
    sim = SimConfig(
        n_samples=int(cfg["n"]),
        te_range=_range(cfg["te"], "te"),
        alpha_range=_range(cfg["alpha"], "alpha"),
        snr_range=_range(cfg["snr"], "snr"),
        fixed_te=cfg.get("te_fixed"),
        fixed_alpha=cfg.get("alpha_fixed"),
        fixed_snr=cfg.get("snr_fixed"),
        n_echoes=int(cfg["echoes"]),
        t1=float(cfg["t1"]),
        seed=int(cfg["seed"]),
    )
    t0 = time.perf_counter()
    ds = generate_1d_dataset(sim, threads=int(cfg["threads"]))
    write_dataset(ds, cfg["out"], {"run_config": provenance(cfg)})
    return {"samples": len(ds), "seconds": time.perf_counter() - t0, "out": cfg["out"]}


def _load_segmentation(spec: str, shape, seed: int) -> np.ndarray:
    from .io import read_dataset, read_map_csv
    from .phantom import synthetic_segmentation

    if spec == "synthetic":
        return synthetic_segmentation(shape, seed=seed)
    p = Path(spec)
    if p.is_dir():
        ds = read_dataset(p)
        if ds.labels is None:
            raise ParameterError(f"container {p} holds no segmentation labels")
        return np.asarray(ds.labels, dtype=np.int64)
    if not p.is_file():
        raise ContainerError(f"segmentation {p} not found")
    lab = read_map_csv(p)
    if not np.array_equal(lab, np.round(lab)):
        raise ParameterError("segmentation CSV must hold integer labels")
    return lab.astype(np.int64)


def cmd_simulate_brain(cfg: dict) -> dict:
    from .core import EchoTrain
    from .io import write_dataset
    from .phantom import generate_brain_phantom

    _require(cfg, "out")
    seed = int(cfg["seed"])
    seg = _load_segmentation(str(cfg["seg"]), _shape(cfg["shape"]), seed)
    train = None
    if cfg.get("alpha_fixed") is not None:
        train = EchoTrain(float(cfg["te_fixed"]), int(cfg["echoes"]), float(cfg["alpha_fixed"]),
                          float(cfg["t1"]))
    elif float(cfg["te_fixed"]) != 12.0 or int(cfg["echoes"]) != 20:
        alpha = float(np.random.default_rng(seed).uniform(90.0, 180.0))
        train = EchoTrain(float(cfg["te_fixed"]), int(cfg["echoes"]), alpha, float(cfg["t1"]))
    t0 = time.perf_counter()
    ph = generate_brain_phantom(seg, train, snr=float(cfg["snr"]), seed=seed)
    write_dataset(ph.to_dataset(), cfg["out"], {"run_config": provenance(cfg)})
    return {"voxels": int(ph.mask.sum()), "shape": list(ph.shape),
            "flip_angle": ph.echo_train.flip_angle, "seconds": time.perf_counter() - t0,
            "out": cfg["out"]}


def cmd_train(cfg: dict) -> dict:
    from .io import read_dataset, save_checkpoint
    from .nn import ModelSpec, TrainConfig, train

    _require(cfg, "data", "out")
    ds = read_dataset(cfg["data"])
    spec = ModelSpec(cfg["model"], n_echoes=ds.n_echoes, hidden_width=int(cfg["hidden_width"]),
                     n_out=len(ds.grid))
    tcfg = TrainConfig(learning_rate=float(cfg["lr"]), epochs=int(cfg["epochs"]),
                       batch_size=int(cfg["batch_size"]), loss_lambda_w=float(cfg["lambda_w"]),
                       validation_fraction=float(cfg["val_fraction"]), seed=int(cfg["seed"]),
                       dtype=cfg["dtype"])

    def progress(rec):
        log.info("epoch %d  train %.6g  val %.6g", rec["epoch"], rec["train_loss"], rec["val_loss"])

    t0 = time.perf_counter()
    ck = train(spec, ds, tcfg, progress)
    ck.metadata["run_config"] = provenance(cfg)
    save_checkpoint(ck, cfg["out"])
    return {"best_epoch": ck.metadata["epoch"], "validation_loss": ck.metadata["validation_loss"],
            "seconds": time.perf_counter() - t0, "out": cfg["out"]}


def cmd_infer(cfg: dict) -> dict:
    from .core import EchoTrain
    from .epg import build_dictionary
    from .io import export_map, load_checkpoint, read_dataset, write_dataset
    from .metrics import mwf
    from .nn import NetworkPredictor
    from .nnls import RegularizerKind, fit_volume
    from .phantom import Dataset

    _require(cfg, "data", "out")
    ds = read_dataset(cfg["data"])
    signals = np.asarray(ds.signals, dtype=np.float64)
    live = np.any(signals != 0, axis=1)
    pred = np.zeros((len(ds), len(ds.grid)))
    extra = {}
    t0 = time.perf_counter()
    if cfg["method"] == "network":
        _require(cfg, "checkpoint")
        ck = load_checkpoint(cfg["checkpoint"])
        if ck.spec.n_out != len(ds.grid):
            raise ParameterError("checkpoint output size differs from the container grid")
        pred[live] = NetworkPredictor(ck).predict(signals[live], ds.echo_times_ms[live], ds.alpha)
    else:
        dte, alpha = np.unique(ds.delta_te[live]), np.unique(ds.alpha[live])
        if dte.size != 1 or alpha.size != 1:
            raise ParameterError("NNLS inference needs one echo train per container")
        D = build_dictionary(EchoTrain(float(dte[0]), ds.n_echoes, float(alpha[0]), ds.t1), ds.grid)
        auto = str(cfg["lam"]) == "auto"
        reg = RegularizerKind(cfg["reg"], 0.0 if auto else float(cfg["lam"]))
        fit = fit_volume(D, signals[live], reg, "auto" if auto else "fixed",
                         float(cfg["chi2_factor"]), threads=int(cfg["threads"]))
        pred[live] = fit.distributions
        lam = np.full(len(ds), np.nan)
        lam[live] = fit.lambdas
        extra = {"lambda": lam, "failed_voxels": int(fit.failed.sum())}
    seconds = time.perf_counter() - t0

    meta = {"kind": "prediction", "source": str(cfg["data"]), "run_config": provenance(cfg),
            "inference_seconds": seconds}
    if "lambda" in extra:
        meta["lambda_per_voxel"] = [None if not np.isfinite(v) else float(v) for v in extra["lambda"]]
        meta["failed_voxels"] = extra["failed_voxels"]
    out_ds = Dataset(ds.signals, pred, ds.delta_te, ds.alpha, ds.snr, ds.combo, ds.grid, ds.t1,
                     labels=ds.labels, shape=ds.shape, meta=meta)
    write_dataset(out_ds, cfg["out"])
    summary = {"voxels": int(live.sum()), "seconds": seconds, "out": cfg["out"]}
    if cfg.get("mwf") is not None:
        fmt = cfg["mwf_format"]
        path = cfg["mwf"] or str(Path(cfg["out"]).with_suffix(".mwf." + ("csv" if fmt == "csv" else "pgm")))
        m = np.zeros(len(ds))
        m[live] = mwf(pred[live], ds.grid)
        m = m.reshape(ds.shape) if ds.shape else m[None, :]
        info = export_map(m, path, fmt)
        Path(path + ".json").write_text(json.dumps({"scale": info, "run_config": provenance(cfg)}, indent=2,
                                                   default=str))
        summary["mwf"] = path
    return summary


def cmd_evaluate(cfg: dict) -> dict:
    from .experiments import ArtifactCache, ExperimentConfig, run_experiment
    from .io import export_map, save_checkpoint
    from .metrics import records_to_csv

    _require(cfg, "out")
    ecfg = ExperimentConfig(
        n_train=int(cfg["n_train"]), n_test=int(cfg["n_test"]), epochs=int(cfg["epochs"]),
        learning_rate=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
        loss_lambda_w=float(cfg["lambda_w"]), seed=int(cfg["seed"]), threads=int(cfg["threads"]),
        hidden_width=int(cfg["hidden_width"]), phantom_shape=_shape(cfg["shape"]),
        phantom_snr=float(cfg["phantom_snr"]),
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = run_experiment(cfg["experiment"], ecfg, ArtifactCache(cfg.get("cache")))
    for mid, ck in res.checkpoints.items():
        ck.metadata["run_config"] = provenance(cfg)
        save_checkpoint(ck, out / f"{mid}.ckpt")
    summary = {"experiment": res.name, "run_config": provenance(cfg), "resolved": res.config, "seconds": time.perf_counter() - t0}
    if res.records:
        with open(out / "records.jsonl", "w") as fh:
            for r in res.records:
                fh.write(r.to_json() + "\n")
        records_to_csv(res.records, out / "summary.csv")
        summary["comparisons"] = res.comparisons
        summary["pooled"] = res.pooled
        summary["means"] = {m: res.mean(m) for m in res.checkpoints}
    if res.extra:
        export_map(res.extra["mwf_pred"], out / "mwf_pred.csv", "csv")
        export_map(res.extra["mwf_ref"], out / "mwf_ref.csv", "csv")
        summary.update({k: res.extra[k] for k in ("mwf_mae", "ref_mass_error", "inference_seconds")})
    (out / "results.json").write_text(json.dumps(summary, indent=2, default=str) + "\n")
    return {k: v for k, v in summary.items() if k not in ("run_config", "resolved", "comparisons")}


COMMANDS = {
    "simulate_1d": cmd_simulate_1d,
    "simulate_brain": cmd_simulate_brain,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(getattr(args, "verbose", 0) or 0, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        summary = COMMANDS[_section(args)](cfg)
    except T2DistError as exc:
        print(f"t2dist: error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
