"""Pure-Python (numpy) implementations of the hot kernels.

These mirror ``_kernels.pyx`` argument for argument and are used whenever the
compiled extension is missing or ``T2DIST_PURE_PYTHON`` is set.
"""
import numpy as np


def epg_cpmg(delta_te, n_echoes, alpha_deg, t1, t2_values):
    """Echo-top amplitudes of a CPMG train for many T2 values.

    Returns an ``(n_echoes, len(t2_values))`` array. Longitudinal states decay
    with T1 but do not regrow, so amplitudes are relative to unit initial
    magnetisation.
    """
    t2 = np.asarray(t2_values, dtype=np.float64)
    n_t2 = t2.size
    n_states = n_echoes + 1
    tau = 0.5 * delta_te
    e2 = np.exp(-tau / t2)[:, None]
    e1 = np.exp(-tau / t1)

    a = np.deg2rad(alpha_deg)
    c2 = np.cos(0.5 * a) ** 2
    s2 = np.sin(0.5 * a) ** 2
    sa = np.sin(a)
    ca = np.cos(a)

    fp = np.zeros((n_t2, n_states))
    fm = np.zeros((n_t2, n_states))
    z = np.zeros((n_t2, n_states))
    fp[:, 0] = 1.0
    fm[:, 0] = 1.0
    out = np.empty((n_echoes, n_t2))

    def relax_shift(fp, fm, z):
        fp *= e2
        fm *= e2
        z *= e1
        fp[:, 1:] = fp[:, :-1].copy()
        fm[:, :-1] = fm[:, 1:].copy()
        fm[:, -1] = 0.0
        fp[:, 0] = fm[:, 0]

    for i in range(n_echoes):
        relax_shift(fp, fm, z)
        fp, fm, z = (
            c2 * fp + s2 * fm + sa * z,
            s2 * fp + c2 * fm - sa * z,
            -0.5 * sa * fp + 0.5 * sa * fm + ca * z,
        )
        relax_shift(fp, fm, z)
        out[i] = np.abs(fp[:, 0])
    return out


def nnls(A, b, maxiter, tol):
    """Lawson-Hanson active-set NNLS.

    Returns ``(x, residual_norm, n_iter)``; ``n_iter`` is ``-1`` when the
    outer iteration cap was hit.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    m, n = A.shape
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = A.T @ b
    it = 0
    while True:
        cand = ~passive & (w > tol)
        if not cand.any():
            break
        if it >= maxiter:
            return x, float(np.linalg.norm(b - A @ x)), -1
        it += 1
        # np.argmax returns the lowest index among ties
        j = int(np.argmax(np.where(cand, w, -np.inf)))
        passive[j] = True
        while True:
            idx = np.flatnonzero(passive)
            s = np.zeros(n)
            s[idx] = np.linalg.lstsq(A[:, idx], b, rcond=None)[0]
            if np.all(s[idx] > 0):
                x = s
                break
            bad = idx[s[idx] <= 0]
            ratios = x[bad] / (x[bad] - s[bad])
            k = int(np.argmin(ratios))
            alpha = ratios[k]
            x = x + alpha * (s - x)
            x[bad[k]] = 0.0
            x[passive & (x <= 0)] = 0.0
            passive &= x > 0
            if not passive.any():
                break
        w = A.T @ (b - A @ x)
    return x, float(np.linalg.norm(b - A @ x)), it
