# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sampler kernels; same arithmetic, in the same order, as ``_sampler_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef Py_ssize_t _level_cross(const double[::1] w, const double[::1] dv, Py_ssize_t* out) noexcept nogil:
    cdef Py_ssize_t n = w.shape[0], i, k = 1
    cdef double ref = w[0]
    out[0] = 0
    for i in range(1, n):
        if fabs(w[i] - ref) >= dv[i]:
            out[k] = i
            k += 1
            ref = w[i]
    return k


cdef Py_ssize_t _fill_point(Py_ssize_t* sel, Py_ssize_t m, Py_ssize_t length) noexcept nogil:
    cdef Py_ssize_t best_len = 0, best_at = -1, j, a, b, last = length - 1
    if m == 0:
        return 0
    if sel[0] > 0:
        best_len = sel[0]
        best_at = 0
    for j in range(m - 1):
        a = sel[j]
        b = sel[j + 1]
        if b - a >= 2 and b - a > best_len:
            best_len = b - a
            best_at = (a + b) // 2
    if sel[m - 1] < last and last - sel[m - 1] > best_len:
        best_len = last - sel[m - 1]
        best_at = last
    return best_at


cdef void _insert_sorted(Py_ssize_t* sel, Py_ssize_t m, Py_ssize_t v) noexcept nogil:
    cdef Py_ssize_t j = m
    while j > 0 and sel[j - 1] > v:
        sel[j] = sel[j - 1]
        j -= 1
    sel[j] = v


cdef double _hold_cost(const double[::1] x, Py_ssize_t lo, Py_ssize_t hi, double v) noexcept nogil:
    cdef double s = 0.0, d
    cdef Py_ssize_t i
    for i in range(lo, hi):
        d = x[i] - v
        s += d * d
    return s


cdef double _segment_cost(const double[::1] x, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    cdef double va = x[a], vb = x[b], s = 0.0, d
    cdef Py_ssize_t i
    for i in range(a + 1, b):
        d = x[i] - (va + (vb - va) * <double>(i - a) / <double>(b - a))
        s += d * d
    return s


cdef int _optimal_subset(const double[::1] x, Py_ssize_t* c, Py_ssize_t m, Py_ssize_t n_keep,
                         Py_ssize_t* out) noexcept nogil:
    cdef Py_ssize_t length = x.shape[0], p, q, k, j
    cdef double v, best
    cdef double* seg = <double*> malloc(m * m * sizeof(double))
    cdef double* cost = <double*> malloc(m * sizeof(double))
    cdef double* new = <double*> malloc(m * sizeof(double))
    cdef Py_ssize_t* back = <Py_ssize_t*> malloc(n_keep * m * sizeof(Py_ssize_t))
    if seg == NULL or cost == NULL or new == NULL or back == NULL:
        free(seg); free(cost); free(new); free(back)
        return -1
    for p in range(m):
        for q in range(p + 1, m):
            seg[p * m + q] = _segment_cost(x, c[p], c[q])
    for q in range(m):
        cost[q] = _hold_cost(x, 0, c[q], x[c[q]])
    for k in range(1, n_keep):
        for q in range(m):
            new[q] = INFINITY
            back[k * m + q] = -1
        for q in range(k, m):
            for p in range(k - 1, q):
                v = cost[p] + seg[p * m + q]
                if v < new[q]:
                    new[q] = v
                    back[k * m + q] = p
        for q in range(m):
            cost[q] = new[q]
    best = INFINITY
    q = -1
    for j in range(n_keep - 1, m):
        v = cost[j] + _hold_cost(x, c[j] + 1, length, x[c[j]])
        if v < best:
            best = v
            q = j
    out[n_keep - 1] = c[q]
    k = n_keep - 1
    while k > 0:
        q = back[k * m + q]
        k -= 1
        out[k] = c[q]
    free(seg); free(cost); free(new); free(back)
    return 0


def level_cross(w, dv):
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[::1] dvv = np.ascontiguousarray(dv, dtype=np.float64)
    cdef Py_ssize_t n = wv.shape[0], k
    cdef Py_ssize_t* buf = <Py_ssize_t*> malloc(max(n, 1) * sizeof(Py_ssize_t))
    try:
        k = _level_cross(wv, dvv, buf)
        return [buf[i] for i in range(k)]
    finally:
        free(buf)


def select(cands, x, kabs, sabs, Py_ssize_t n_keep=8, bint optimal=True):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t length = xv.shape[0], m, i
    sel = sorted(set(int(i) for i in cands))
    m = len(sel)
    if m > n_keep and not optimal:
        ranked = sorted(sel, key=lambda j: (-kabs[j], -sabs[j], j))
        return sorted(ranked[:n_keep])
    cdef Py_ssize_t* c = <Py_ssize_t*> malloc((max(m, n_keep) + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* out = <Py_ssize_t*> malloc(n_keep * sizeof(Py_ssize_t))
    try:
        for i in range(m):
            c[i] = sel[i]
        if m > n_keep:
            if _optimal_subset(xv, c, m, n_keep, out) != 0:
                raise MemoryError()
            return [out[i] for i in range(n_keep)]
        while m < n_keep:
            _insert_sorted(c, m, _fill_point(c, m, length))
            m += 1
        return [c[i] for i in range(n_keep)]
    finally:
        free(c)
        free(out)


def compress_batch(x, kabs, sabs, dv, Py_ssize_t n_keep=8, bint optimal=True):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] dvv = np.ascontiguousarray(dv, dtype=np.float64)
    cdef Py_ssize_t rows = xv.shape[0], length = xv.shape[1], r, m, i
    out = np.empty((rows, n_keep), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ov = out
    if not optimal:
        for r in range(rows):
            out[r] = select(level_cross(x[r], dv[r]), x[r], kabs[r], sabs[r], n_keep, False)
        return out
    cdef Py_ssize_t* c = <Py_ssize_t*> malloc((length + n_keep + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* sel = <Py_ssize_t*> malloc(n_keep * sizeof(Py_ssize_t))
    cdef int status = 0
    try:
        with nogil:
            for r in range(rows):
                m = _level_cross(xv[r], dvv[r], c)
                if m > n_keep:
                    if _optimal_subset(xv[r], c, m, n_keep, sel) != 0:
                        status = -1
                        break
                    for i in range(n_keep):
                        ov[r, i] = sel[i]
                else:
                    while m < n_keep:
                        _insert_sorted(c, m, _fill_point(c, m, length))
                        m += 1
                    for i in range(n_keep):
                        ov[r, i] = c[i]
        if status != 0:
            raise MemoryError()
        return out
    finally:
        free(c)
        free(sel)


cdef void _reconstruct(const cnp.int64_t[::1] idx, const double[::1] vals, double[::1] out) noexcept nogil:
    cdef Py_ssize_t n = idx.shape[0], length = out.shape[0], i, j, a, b
    cdef double va, vb
    for i in range(0, idx[0]):
        out[i] = vals[0]
    for j in range(n - 1):
        a = idx[j]
        b = idx[j + 1]
        va = vals[j]
        vb = vals[j + 1]
        for i in range(a, b):
            out[i] = va + (vb - va) * <double>(i - a) / <double>(b - a)
    for i in range(idx[n - 1], length):
        out[i] = vals[n - 1]


def reconstruct(idx, vals, Py_ssize_t length=48):
    out = np.empty(length, dtype=np.float64)
    _reconstruct(np.ascontiguousarray(idx, dtype=np.int64), np.ascontiguousarray(vals, dtype=np.float64), out)
    return out


def reconstruct_batch(idx, vals, Py_ssize_t length=48):
    cdef const cnp.int64_t[:, ::1] iv = np.ascontiguousarray(idx, dtype=np.int64)
    cdef const double[:, ::1] vv = np.ascontiguousarray(vals, dtype=np.float64)
    out = np.empty((iv.shape[0], length), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r
    with nogil:
        for r in range(iv.shape[0]):
            _reconstruct(iv[r], vv[r], ov[r])
    return out
