"""Compiled vs pure-Python kernels.

Times the two hot paths on workloads shaped like real use: an EPG dictionary
on the dense 1 ms grid (one per simulated sample with its own echo train),
and a batch of 20 x 60 NNLS solves (one per voxel). Each backend's output is
checked against the other before timing.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
import argparse
import json
import sys
import timeit

import numpy as np

from t2dist import _kernels_py
from t2dist.core import EchoTrain, dense_grid, inference_grid
from t2dist.epg import build_dictionary
from t2dist.nnls import DUAL_TOL, _scale

try:
    from t2dist import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None


def _nnls_problems(n_voxels, seed=0):
    rng = np.random.default_rng(seed)
    D = build_dictionary(EchoTrain(10.0, 20, 150.0), inference_grid()).entries
    A = np.ascontiguousarray(D)
    problems = []
    for _ in range(n_voxels):
        x = np.zeros(60)
        x[rng.choice(60, 3, replace=False)] = rng.dirichlet(np.ones(3))
        b = A @ x
        b = np.hypot(b + 0.01 * rng.standard_normal(20), 0.01 * rng.standard_normal(20))
        problems.append((A, b, DUAL_TOL * _scale(A, b)))
    return problems


def workloads(n_voxels):
    t2 = dense_grid().values

    def epg(mod):
        return lambda: mod.epg_cpmg(11.0, 20, 140.0, 1000.0, t2)

    problems = _nnls_problems(n_voxels)

    def nnls(mod):
        return lambda: [mod.nnls(A, b, 180, tol) for A, b, tol in problems]

    return {"epg dictionary (20 x 2000)": epg, f"nnls x{n_voxels} (20 x 60)": nnls}


def check_agreement(n_voxels):
    t2 = dense_grid().values
    a = np.asarray(_kernels_c.epg_cpmg(11.0, 20, 140.0, 1000.0, t2))
    b = _kernels_py.epg_cpmg(11.0, 20, 140.0, 1000.0, t2)
    epg_diff = float(np.abs(a - b).max())
    nnls_diff = 0.0
    for A, bb, tol in _nnls_problems(min(n_voxels, 50)):
        xa = np.asarray(_kernels_c.nnls(A, bb, 180, tol)[0])
        xb = np.asarray(_kernels_py.nnls(A, bb, 180, tol)[0])
        nnls_diff = max(nnls_diff, float(np.abs(xa - xb).max()))
    return epg_diff, nnls_diff


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--voxels", type=int, default=500)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if _kernels_c is None:
        print("compiled extension not built; run `pip install --no-build-isolation -e .`")
        return 1

    epg_diff, nnls_diff = check_agreement(args.voxels)
    print(f"max |cython - python|: epg {epg_diff:.2e}, nnls {nnls_diff:.2e}")

    rows = []
    for name, make in workloads(args.voxels).items():
        t = {}
        for label, mod in (("cython", _kernels_c), ("python", _kernels_py)):
            fn = make(mod)
            fn()  # warm caches
            t[label] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        rows.append({"kernel": name, "cython_s": t["cython"], "python_s": t["python"],
                     "speedup": t["python"] / t["cython"]})

    w = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel':<{w}}  {'cython':>10}  {'python':>10}  {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<{w}}  {r['cython_s'] * 1e3:>8.2f}ms  {r['python_s'] * 1e3:>8.2f}ms"
              f"  {r['speedup']:>7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"agreement": {"epg": epg_diff, "nnls": nnls_diff}, "timings": rows}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
