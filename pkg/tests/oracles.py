"""Independent reference implementations used only by the tests."""
import itertools

import numpy as np
from scipy.optimize import linprog


def isochromat_cpmg(delta_te, n_echoes, alpha_deg, t1, t2, n_spins=2048):
    """Brute-force Bloch simulation of a CPMG train over an isochromat ensemble.

    Each spin precesses by its own angle per half echo spacing; the echo is
    the magnitude of the ensemble-average transverse magnetisation.
    """
    phi = 2 * np.pi * np.arange(n_spins) / n_spins
    cphi, sphi = np.cos(phi), np.sin(phi)
    mx = np.ones(n_spins)
    my = np.zeros(n_spins)
    mz = np.zeros(n_spins)
    tau = delta_te / 2
    e2, e1 = np.exp(-tau / t2), np.exp(-tau / t1)
    a = np.deg2rad(alpha_deg)
    ca, sa = np.cos(a), np.sin(a)

    def free(mx, my, mz):
        mx, my, mz = mx * e2, my * e2, mz * e1
        return mx * cphi - my * sphi, mx * sphi + my * cphi, mz

    echoes = []
    for _ in range(n_echoes):
        mx, my, mz = free(mx, my, mz)
        # rotation about x (the axis the magnetisation was tipped onto)
        my, mz = my * ca - mz * sa, my * sa + mz * ca
        mx, my, mz = free(mx, my, mz)
        echoes.append(abs(complex(mx.mean(), my.mean())))
    return np.array(echoes)


def nnls_by_enumeration(A, b):
    """All optimal basic solutions of min ||Ax - b||, x >= 0, by support enumeration.

    Returns (best_objective, list of optimal x).
    """
    m, n = A.shape
    cands = []
    for r in range(0, min(m, n) + 1):
        for supp in itertools.combinations(range(n), r):
            x = np.zeros(n)
            if r:
                sub = A[:, supp]
                if np.linalg.matrix_rank(sub) < r:
                    continue
                x[list(supp)] = np.linalg.lstsq(sub, b, rcond=None)[0]
            if np.any(x < -1e-12):
                continue
            x = np.maximum(x, 0)
            cands.append((float(np.sum((A @ x - b) ** 2)), x))
    best = min(c[0] for c in cands)
    opt = [x for f, x in cands if f <= best + 1e-10 * max(1.0, best)]
    return best, opt


def transport_lp(p, q, positions=None):
    """Exact minimum-cost transport between two histograms via an LP."""
    n = len(p)
    pos = np.arange(n) / (n - 1) if positions is None else np.asarray(positions)
    cost = np.abs(pos[:, None] - pos[None, :]).ravel()
    a_eq = []
    for i in range(n):
        row = np.zeros((n, n))
        row[i, :] = 1
        a_eq.append(row.ravel())
    for j in range(n):
        col = np.zeros((n, n))
        col[:, j] = 1
        a_eq.append(col.ravel())
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=np.concatenate([p, q]),
                  bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    assert res.status == 0
    return res.fun


def projected_gradient_nnls(A, b, iters=200000, tol=1e-14):
    """Plain projected-gradient solve of min ||Ax - b||^2, x >= 0."""
    step = 1.0 / np.linalg.norm(A, 2) ** 2
    x = np.zeros(A.shape[1])
    for _ in range(iters):
        x_new = np.maximum(x - step * (A.T @ (A @ x - b)), 0)
        if np.max(np.abs(x_new - x)) < tol:
            return x_new
        x = x_new
    return x
