# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: CPMG EPG recursion and Lawson-Hanson NNLS.

Signatures and results match ``_kernels_py`` (up to floating-point rounding
in the least-squares subproblem).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, cos, sin, fabs, sqrt, M_PI
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef void _relax_shift(double* fp, double* fm, double* z, int ns,
                       double e2, double e1) noexcept nogil:
    cdef int k
    for k in range(ns):
        fp[k] *= e2
        fm[k] *= e2
        z[k] *= e1
    for k in range(ns - 1, 0, -1):
        fp[k] = fp[k - 1]
    for k in range(ns - 1):
        fm[k] = fm[k + 1]
    fm[ns - 1] = 0.0
    fp[0] = fm[0]


cdef void _epg_one(double tau, int n_echoes, double c2, double s2, double sa,
                   double ca, double e1, double t2, double* fp, double* fm,
                   double* z, double* out, int stride) noexcept nogil:
    cdef int ns = n_echoes + 1
    cdef int i, k
    cdef double e2 = exp(-tau / t2)
    cdef double p, m, q
    for k in range(ns):
        fp[k] = 0.0
        fm[k] = 0.0
        z[k] = 0.0
    fp[0] = 1.0
    fm[0] = 1.0
    for i in range(n_echoes):
        _relax_shift(fp, fm, z, ns, e2, e1)
        for k in range(ns):
            p = fp[k]
            m = fm[k]
            q = z[k]
            fp[k] = c2 * p + s2 * m + sa * q
            fm[k] = s2 * p + c2 * m - sa * q
            z[k] = -0.5 * sa * p + 0.5 * sa * m + ca * q
        _relax_shift(fp, fm, z, ns, e2, e1)
        out[i * stride] = fabs(fp[0])


def epg_cpmg(double delta_te, int n_echoes, double alpha_deg, double t1, t2_values):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] t2 = np.ascontiguousarray(t2_values, dtype=np.float64).ravel()
    cdef Py_ssize_t n_t2 = t2.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n_echoes, n_t2))
    cdef int ns = n_echoes + 1
    cdef double tau = 0.5 * delta_te
    cdef double a = alpha_deg * M_PI / 180.0
    cdef double c2 = cos(0.5 * a) ** 2
    cdef double s2 = sin(0.5 * a) ** 2
    cdef double sa = sin(a)
    cdef double ca = cos(a)
    cdef double e1 = exp(-tau / t1)
    cdef double* buf
    cdef Py_ssize_t j
    cdef double* t2p = &t2[0] if n_t2 > 0 else NULL
    cdef double* outp = &out[0, 0] if n_t2 > 0 else NULL
    if n_t2 == 0:
        return out
    buf = <double*> malloc(3 * ns * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    with nogil:
        for j in range(n_t2):
            _epg_one(tau, n_echoes, c2, s2, sa, ca, e1, t2p[j],
                     buf, buf + ns, buf + 2 * ns, outp + j, <int> n_t2)
    free(buf)
    return out


cdef int _lstsq_passive(const double* A, const double* b, int m, int n,
                        const int* idx, int r, double* work, double* rhs,
                        double* s) noexcept nogil:
    """Householder QR solve of min ||A[:, idx] s - b||; writes s[0:r].

    work holds an m*r column-major copy, rhs an m-vector. Returns 0 on
    success, 1 when a diagonal of R vanishes.
    """
    cdef int i, j, k
    cdef double norm, alpha, vnorm2, dot, tmp
    for j in range(r):
        for i in range(m):
            work[j * m + i] = A[i * n + idx[j]]
    for i in range(m):
        rhs[i] = b[i]
    cdef int kmax = r if r < m else m
    for k in range(kmax):
        norm = 0.0
        for i in range(k, m):
            norm += work[k * m + i] * work[k * m + i]
        norm = sqrt(norm)
        if norm == 0.0:
            return 1
        alpha = -norm if work[k * m + k] >= 0 else norm
        # v = x - alpha e1, stored in place
        work[k * m + k] -= alpha
        vnorm2 = 0.0
        for i in range(k, m):
            vnorm2 += work[k * m + i] * work[k * m + i]
        if vnorm2 > 0.0:
            for j in range(k + 1, r):
                dot = 0.0
                for i in range(k, m):
                    dot += work[k * m + i] * work[j * m + i]
                tmp = 2.0 * dot / vnorm2
                for i in range(k, m):
                    work[j * m + i] -= tmp * work[k * m + i]
            dot = 0.0
            for i in range(k, m):
                dot += work[k * m + i] * rhs[i]
            tmp = 2.0 * dot / vnorm2
            for i in range(k, m):
                rhs[i] -= tmp * work[k * m + i]
        # R[k, k] = alpha; the rest of column k is scratch from here on
        work[k * m + k] = alpha
    if r > m:
        return 1
    for k in range(r - 1, -1, -1):
        tmp = rhs[k]
        for j in range(k + 1, r):
            tmp -= work[j * m + k] * s[j]
        if fabs(work[k * m + k]) < 1e-300:
            return 1
        s[k] = tmp / work[k * m + k]
    return 0


def nnls(A_in, b_in, int maxiter, double tol):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] A = np.ascontiguousarray(A_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] b = np.ascontiguousarray(b_in, dtype=np.float64)
    cdef int m = A.shape[0]
    cdef int n = A.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] x = np.zeros(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] w = np.zeros(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] s = np.zeros(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sp = np.zeros(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] resid = np.zeros(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rhs = np.zeros(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] work = np.zeros(m * n + 1)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] passive = np.zeros(n, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] idx = np.zeros(n, dtype=np.int32)
    cdef const double* Ap = &A[0, 0]
    cdef int i, j, k, r, it = 0, best, feasible, kbad, status = 0
    cdef double wmax, alpha, ratio, acc, rn
    with nogil:
        while True:
            for i in range(m):
                acc = b[i]
                for j in range(n):
                    acc -= Ap[i * n + j] * x[j]
                resid[i] = acc
            for j in range(n):
                acc = 0.0
                for i in range(m):
                    acc += Ap[i * n + j] * resid[i]
                w[j] = acc
            best = -1
            wmax = tol
            for j in range(n):
                if passive[j] == 0 and w[j] > wmax:
                    wmax = w[j]
                    best = j
            if best < 0:
                break
            if it >= maxiter:
                status = -1
                break
            it += 1
            passive[best] = 1
            while True:
                r = 0
                for j in range(n):
                    if passive[j]:
                        idx[r] = j
                        r += 1
                for j in range(n):
                    s[j] = 0.0
                if _lstsq_passive(Ap, &b[0], m, n, <const int*> &idx[0], r, &work[0], &rhs[0], &sp[0]) != 0:
                    for j in range(r):
                        sp[j] = 0.0
                feasible = 1
                for j in range(r):
                    s[idx[j]] = sp[j]
                    if sp[j] <= 0.0:
                        feasible = 0
                if feasible:
                    for j in range(n):
                        x[j] = s[j]
                    break
                alpha = 2.0
                kbad = -1
                for j in range(r):
                    k = idx[j]
                    if s[k] <= 0.0:
                        ratio = x[k] / (x[k] - s[k])
                        if ratio < alpha:
                            alpha = ratio
                            kbad = k
                for j in range(n):
                    x[j] = x[j] + alpha * (s[j] - x[j])
                if kbad >= 0:
                    x[kbad] = 0.0
                r = 0
                for j in range(n):
                    if passive[j] and x[j] <= 0.0:
                        x[j] = 0.0
                        passive[j] = 0
                    if passive[j]:
                        r += 1
                if r == 0:
                    break
        rn = 0.0
        for i in range(m):
            acc = b[i]
            for j in range(n):
                acc -= Ap[i * n + j] * x[j]
            rn += acc * acc
    return x, sqrt(rn), (status if status < 0 else it)
