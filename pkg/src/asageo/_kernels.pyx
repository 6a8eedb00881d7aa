# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: scalar k-means, anchor lookup and ranked-list metrics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def kmeans_1d(q, init_centers, int max_iters=100, double tol=1e-9):
    cdef double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] centers_arr = np.array(init_centers, dtype=np.float64)
    cdef double[::1] c = centers_arr
    cdef Py_ssize_t n = qv.shape[0], k = c.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] labels_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] new_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef cnp.int64_t[::1] lab = new_arr
    cdef cnp.int64_t[::1] counts = np.zeros(k, dtype=np.int64)
    cdef double[::1] sums = np.zeros(k, dtype=np.float64)
    cdef Py_ssize_t i, j, best, it, far
    cdef double d, bd, shift, newc, sse, r, fd
    cdef bint stable, converged = False
    history = []

    for it in range(max_iters):
        for j in range(k):
            counts[j] = 0
        for i in range(n):
            best = 0
            bd = fabs(qv[i] - c[0])
            for j in range(1, k):
                d = fabs(qv[i] - c[j])
                if d < bd:
                    bd = d
                    best = j
            lab[i] = best
            counts[best] += 1
        for j in range(k):
            if counts[j] != 0:
                continue
            far = -1
            fd = -1.0
            for i in range(n):
                if counts[lab[i]] < 2:
                    continue
                d = fabs(qv[i] - c[lab[i]])
                if d > fd:
                    fd = d
                    far = i
            counts[lab[far]] -= 1
            lab[far] = j
            counts[j] = 1
        for j in range(k):
            sums[j] = 0.0
        for i in range(n):
            sums[lab[i]] += qv[i]
        shift = 0.0
        for j in range(k):
            newc = sums[j] / counts[j]
            d = fabs(newc - c[j])
            if d > shift:
                shift = d
            c[j] = newc
        sse = 0.0
        for i in range(n):
            r = qv[i] - c[lab[i]]
            sse += r * r
        history.append(sse)
        stable = True
        for i in range(n):
            if lab[i] != labels[i]:
                stable = False
            labels[i] = lab[i]
        if stable or shift < tol:
            converged = True
            break
    return labels_arr, centers_arr, np.array(history, dtype=np.float64), converged


def nearest_indices(q, centers):
    cdef double[::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[::1] cv = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t n = qv.shape[0], k = cv.shape[0], i, j, best
    cdef double d, bd
    out = np.empty(k, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    for j in range(k):
        best = 0
        bd = fabs(qv[0] - cv[j])
        for i in range(1, n):
            d = fabs(qv[i] - cv[j])
            if d < bd:
                bd = d
                best = i
        o[j] = best
    return out


def ranking_metrics(relevant):
    rel_arr = np.ascontiguousarray(relevant, dtype=np.uint8)
    if rel_arr.ndim != 2:
        raise ValueError("relevant must be 2-D")
    cdef cnp.uint8_t[:, ::1] rel = rel_arr
    cdef Py_ssize_t nq = rel.shape[0], ng = rel.shape[1], a, b
    ap = np.zeros(nq, dtype=np.float64)
    first = np.full(nq, -1, dtype=np.int64)
    n_rel = np.zeros(nq, dtype=np.int64)
    cdef double[::1] apv = ap
    cdef cnp.int64_t[::1] fv = first
    cdef cnp.int64_t[::1] nv = n_rel
    cdef cnp.int64_t hits
    cdef double acc
    for a in range(nq):
        hits = 0
        acc = 0.0
        for b in range(ng):
            if rel[a, b]:
                hits += 1
                acc += <double>hits / <double>(b + 1)
                if hits == 1:
                    fv[a] = b
        nv[a] = hits
        if hits:
            apv[a] = acc / hits
    return ap, first, n_rel
