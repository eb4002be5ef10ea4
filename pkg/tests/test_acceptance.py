"""Acceptance suite: twelve criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
happen (they are also repeated in the terminal summary), or directly with
``python tests/test_acceptance.py``.

Criteria 8-11 train networks at desk scale (50k samples, 50 epochs) and take
roughly half an hour on one core. Trained models are shared between
criteria through one cache; set ``T2DIST_ACCEPTANCE_CACHE=/some/dir`` to keep
datasets and checkpoints between sessions.
"""
import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import isochromat_cpmg, nnls_by_enumeration, transport_lp  # noqa: E402

from t2dist.core import EchoTrain  # noqa: E402
from t2dist.epg import epg_dictionary  # noqa: E402
from t2dist.experiments import ArtifactCache, ExperimentConfig, run_experiment  # noqa: E402
from t2dist.metrics import wasserstein1  # noqa: E402
from t2dist.nn import ModelSpec, build_model, count_parameters, loss_and_grad, prepare_input  # noqa: E402
from t2dist.nnls import kkt_violation, nnls  # noqa: E402
from t2dist.phantom import rician_noise_array  # noqa: E402

RESULTS: dict[int, str] = {}

_cache_dir = os.environ.get("T2DIST_ACCEPTANCE_CACHE")
CACHE = ArtifactCache(_cache_dir)
DESK = ExperimentConfig(threads=os.cpu_count() or 1)
_EXPERIMENTS: dict = {}


def experiment(name):
    if name not in _EXPERIMENTS:
        _EXPERIMENTS[name] = run_experiment(name, DESK, CACHE)
    return _EXPERIMENTS[name]


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line, flush=True)
    assert ok, line


# -- 1-7: numerical kernels ---------------------------------------------------------


def test_criterion_01_epg_analytic_anchor():
    t0 = time.perf_counter()
    t2 = np.array([20.0, 80.0, 500.0, 2000.0])
    sig = epg_dictionary(EchoTrain(12.0, 20, 180.0), t2)
    te = 12.0 * np.arange(1, 21)
    dev = float(np.abs(sig - np.exp(-te[:, None] / t2[None, :])).max())
    dt = time.perf_counter() - t0
    report(1, dev < 1e-9 and dt < 1.0, f"max deviation {dev:.2e} (< 1e-9), {dt:.3f}s (< 1s)")


def test_criterion_02_epg_vs_isochromat():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        alpha = rng.uniform(90, 180)
        t2 = float(np.exp(rng.uniform(np.log(10), np.log(2000))))
        dte = rng.uniform(5, 15)
        epg = epg_dictionary(EchoTrain(dte, 20, alpha, 1000.0), [t2])[:, 0]
        iso = isochromat_cpmg(dte, 20, alpha, 1000.0, t2)
        worst = max(worst, float(np.abs(epg - iso).max()))
    dt = time.perf_counter() - t0
    report(2, worst < 1e-4 and dt < 60, f"max |EPG - isochromat| {worst:.2e} (< 1e-4), {dt:.1f}s")


def test_criterion_03_nnls_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = worst_kkt = 0.0
    for _ in range(100):
        A = rng.standard_normal((5, 8))
        b = rng.standard_normal(5)
        x, _ = nnls(A, b)
        best, sols = nnls_by_enumeration(A, b)
        worst = max(worst, min(float(np.abs(x - s).max()) for s in sols))
        worst_kkt = max(worst_kkt, kkt_violation(A, b, x))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and worst_kkt <= 1e-8 and dt < 60
    report(3, ok, f"max |x - enumeration| {worst:.2e} (< 1e-6), max KKT violation {worst_kkt:.1e}, {dt:.1f}s")


def test_criterion_04_wasserstein_oracle():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        worst = max(worst, abs(wasserstein1(p, q) - transport_lp(p, q)))
    axioms = True
    for _ in range(1000):
        a, b, c = rng.dirichlet(np.ones(6), 3)
        ab, bc, ac = wasserstein1(a, b), wasserstein1(b, c), wasserstein1(a, c)
        axioms &= wasserstein1(a, a) == 0.0
        axioms &= ab >= 0 and abs(ab - wasserstein1(b, a)) < 1e-15
        axioms &= ac <= ab + bc + 1e-15
    report(4, worst < 1e-9 and axioms, f"max |W1 - LP| {worst:.2e} (< 1e-9), axioms hold: {axioms}")


def _numeric(model, x, ref, i, coord, h=1e-5):
    p = model.params[i]
    old = p[coord]
    p[coord] = old + h
    fp = loss_and_grad(model, x, ref, 1.0)[0]
    p[coord] = old - h
    fm = loss_and_grad(model, x, ref, 1.0)[0]
    p[coord] = old
    return (fp - fm) / (2 * h)


def test_criterion_05_gradient_check():
    checked = {"conv": 0, "linear weight": 0, "linear bias": 0}
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for kind in ("miml", "p2t2-fc", "p2t2-convfc"):
            spec = ModelSpec(kind, 2, hidden_width=4, n_hidden=2, n_out=6)
            model = build_model(spec, rng, dtype=np.float64)
            for p in model.params:
                if p.ndim == 1:
                    p[...] = rng.normal(0, 0.3, p.shape)
            x = prepare_input(spec, rng.uniform(0.1, 1, (3, 2)), rng.uniform(5, 15, (3, 2)))
            ref = rng.dirichlet(np.ones(6), 3)
            _, grads = loss_and_grad(model, x, ref, 1.0)
            conv = {0, 1} if kind == "p2t2-convfc" else set()
            for i, p in enumerate(model.params):
                layer = "conv" if i in conv else ("linear weight" if p.ndim == 2 else "linear bias")
                for flat in range(p.size):
                    coord = np.unravel_index(flat, p.shape)
                    a, n = grads[i][coord], _numeric(model, x, ref, i, coord)
                    if max(abs(a), abs(n)) <= 1e-8:
                        continue
                    worst = max(worst, abs(a - n) / max(abs(a), abs(n)))
                    checked[layer] += 1
    ok = worst < 1e-4 and min(checked.values()) >= 50
    report(5, ok, f"max relative error {worst:.2e} (< 1e-4), coordinates checked {checked}")


def test_criterion_06_parameter_counts():
    miml = count_parameters(ModelSpec("miml", 20))
    conv = count_parameters(ModelSpec("p2t2-convfc", 20))
    fc = count_parameters(ModelSpec("p2t2-fc", 20))
    closed_fc = 40 * 256 + 256 + 11 * (256 * 256 + 256) + 256 * 60
    allocated = all(sum(p.size for p in build_model(ModelSpec(k, 20), 0).params)
                    == count_parameters(ModelSpec(k, 20)) for k in ("miml", "p2t2-fc", "p2t2-convfc"))
    ok = miml == 349_696 and conv == 349_699 and fc == closed_fc and allocated
    report(6, ok, f"MIML {miml:,}, P2T2-ConvFC {conv:,}, P2T2-FC {fc:,} (closed form {closed_fc:,})")


def test_criterion_07_rician_calibration():
    rng = np.random.default_rng(7)
    out = rician_noise_array(np.ones((100_000, 1)), 10.0, rng)[:, 0]
    scale = float(out.std())
    rel = abs(scale * 10.0 - 1.0)
    report(7, rel < 0.02, f"measured scale {scale:.5f} vs 1/SNR 0.1, relative offset {rel:.2%} (< 2%)")


# -- 8-11: desk-scale training ---------------------------------------------------------


@pytest.mark.slow
def test_criterion_08_fixed_te_ordering():
    res = experiment("fixed-te")
    parts, ok = [], True
    for snr in (10.0, 20.0):
        row = res.comparison("MIML_fix", "P2T2-FC", snr=snr, metric="mse")
        good = row["candidate_mean"] <= row["baseline_mean"] and row["p_value"] < 0.05
        ok &= good
        parts.append(f"SNR {snr:g}: MIML_fix {row['baseline_mean']:.5f} vs P2T2-FC "
                     f"{row['candidate_mean']:.5f}, p={row['p_value']:.1e}")
    n = len(res.records[0].mse)
    report(8, ok and n >= 5000, "; ".join(parts) + f"; n={n}")


@pytest.mark.slow
def test_criterion_09_varied_te_gap():
    res = experiment("varied-te")
    row = res.pooled_comparison("MIML_var", "P2T2-FC")
    assert row["metric"] == "mse"
    ok = row["relative_reduction"] >= 0.15 and row["p_value"] < 0.05
    report(9, ok, f"pooled SNR sweep MSE: MIML_var {row['baseline_mean']:.5f} vs P2T2-FC "
                  f"{row['candidate_mean']:.5f}, reduction {row['relative_reduction']:.1%} (>= 15%), "
                  f"p={row['p_value']:.1e}")


@pytest.mark.slow
def test_criterion_10_unseen_te_ordering():
    res = experiment("unseen-te")
    base = res.mean("MIML_var")
    fc, conv = res.mean("P2T2-FC"), res.mean("P2T2-ConvFC")
    ok = fc < base and conv < base
    report(10, ok, f"TE in [12,15] ms MSE: MIML_var {base:.5f}, P2T2-FC {fc:.5f}, "
                   f"P2T2-ConvFC {conv:.5f} (MIML_fix {res.mean('MIML_fix'):.5f})")


@pytest.mark.slow
def test_criterion_11_brain_mwf():
    res = experiment("brain")
    mae, mass = res.extra["mwf_mae"], res.extra["ref_mass_error"]
    ok = mae < 0.1 and mass < 1e-6
    report(11, ok, f"64x64 phantom at SNR 80: MWF MAE {mae:.4f} (< 0.1), "
                   f"max |sum(ref) - 1| {mass:.1e} (< 1e-6), inference {res.extra['inference_seconds']:.2f}s")


# -- 12: reproducibility ------------------------------------------------------------------


def _cli(*args):
    cmd = [sys.executable, "-m", "t2dist.cli", *map(str, args)]
    subprocess.run(cmd, check=True, capture_output=True)


def _tree_bytes(path: Path) -> dict:
    if path.is_file():
        return {path.name: path.read_bytes()}
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_criterion_12_reproducibility():
    with tempfile.TemporaryDirectory() as tmp:
        t = Path(tmp)
        for tag, threads in (("a", 1), ("b", 1), ("c", 4)):
            _cli("simulate", "1d", "--n", 3000, "--seed", 12, "--threads", threads, "--out", t / f"d{tag}")
            _cli("simulate", "brain", "--shape", "32x32", "--seed", 12, "--threads", threads,
                 "--out", t / f"p{tag}")
            _cli("train", "--model", "p2t2-convfc", "--data", t / "da", "--epochs", 3,
                 "--hidden-width", 64, "--seed", 12, "--threads", threads, "--out", t / f"m{tag}.ckpt")
        same = {}
        for kind in ("d", "p"):
            ref = _tree_bytes(t / f"{kind}a")
            same[kind] = all(_tree_bytes(t / f"{kind}{tag}") == ref for tag in "bc")
        ref = (t / "ma.ckpt").read_bytes()
        same["ckpt"] = all((t / f"m{tag}.ckpt").read_bytes() == ref for tag in "bc")
    report(12, all(same.values()),
           f"byte-identical across runs and thread counts 1/4: datasets {same['d']}, "
           f"phantoms {same['p']}, checkpoints {same['ckpt']}")


if __name__ == "__main__":
    for name, fn in sorted((k, v) for k, v in dict(globals()).items() if k.startswith("test_criterion_")):
        try:
            fn()
        except AssertionError:
            pass
    print("\n".join(RESULTS[k] for k in sorted(RESULTS)))
    sys.exit(0 if all("PASS" in v for v in RESULTS.values()) else 1)
