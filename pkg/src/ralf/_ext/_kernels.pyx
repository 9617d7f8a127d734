# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``pykernels``; identical signatures."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, log1p, sqrt, INFINITY

cnp.import_array()

cdef double ALIGN_CLAMP = 1.0 - 1e-8


cdef inline double _min(double a, double b) nogil:
    return a if a < b else b


cdef inline double _max(double a, double b) nogil:
    return a if a > b else b


def intersection_matrix(boxes):
    cdef double[:, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = bx.shape[0], i, j
    out = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double li, ti, ri, bi, lj, tj, rj, bj, iw, ih
    with nogil:
        for i in range(n):
            li = bx[i, 0] - bx[i, 2] / 2
            ri = bx[i, 0] + bx[i, 2] / 2
            ti = bx[i, 1] - bx[i, 3] / 2
            bi = bx[i, 1] + bx[i, 3] / 2
            for j in range(n):
                lj = bx[j, 0] - bx[j, 2] / 2
                rj = bx[j, 0] + bx[j, 2] / 2
                tj = bx[j, 1] - bx[j, 3] / 2
                bj = bx[j, 1] + bx[j, 3] / 2
                iw = _min(ri, rj) - _max(li, lj)
                ih = _min(bi, bj) - _max(ti, tj)
                if iw > 0 and ih > 0:
                    o[i, j] = iw * ih
    return out


def alignment(boxes):
    cdef double[:, ::1] bx = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    cdef Py_ssize_t n = bx.shape[0], i, j, t
    if n < 2:
        return 0.0
    lines_arr = np.empty((n, 6), dtype=np.float64)
    cdef double[:, ::1] lines = lines_arr
    cdef double best, g, total = 0.0
    with nogil:
        for i in range(n):
            lines[i, 0] = bx[i, 0] - bx[i, 2] / 2
            lines[i, 1] = bx[i, 0]
            lines[i, 2] = bx[i, 0] + bx[i, 2] / 2
            lines[i, 3] = bx[i, 1] - bx[i, 3] / 2
            lines[i, 4] = bx[i, 1]
            lines[i, 5] = bx[i, 1] + bx[i, 3] / 2
        for i in range(n):
            best = INFINITY
            for j in range(n):
                if i == j:
                    continue
                for t in range(6):
                    g = fabs(lines[i, t] - lines[j, t])
                    if g < best:
                        best = g
            if best > ALIGN_CLAMP:
                best = ALIGN_CLAMP
            total += -log1p(-best)
    return total / n


def knn_scan(emb, query, Py_ssize_t k, Py_ssize_t exclude, rank):
    cdef double[:, ::1] e = np.ascontiguousarray(emb, dtype=np.float64)
    cdef double[::1] q = np.ascontiguousarray(query, dtype=np.float64)
    cdef long long[::1] rk = np.ascontiguousarray(rank, dtype=np.int64)
    cdef Py_ssize_t n = e.shape[0], dim = e.shape[1], i, c, pos
    out = np.empty(k, dtype=np.int64)
    cdef long long[::1] idx = out
    score_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] sc = score_arr
    cdef Py_ssize_t filled = 0
    cdef double s
    with nogil:
        for i in range(n):
            if i == exclude:
                continue
            s = 0.0
            for c in range(dim):
                s += e[i, c] * q[c]
            # insertion into the sorted top-k buffer (desc score, asc rank)
            if filled == k:
                if s < sc[k - 1] or (s == sc[k - 1] and rk[i] > rk[idx[k - 1]]):
                    continue
                pos = k - 1
            else:
                pos = filled
                filled += 1
            while pos > 0 and (s > sc[pos - 1] or (s == sc[pos - 1] and rk[i] < rk[idx[pos - 1]])):
                sc[pos] = sc[pos - 1]
                idx[pos] = idx[pos - 1]
                pos -= 1
            sc[pos] = s
            idx[pos] = i
    return out[:filled]


def ball_counts(real, gen, radii):
    cdef double[:, ::1] r = np.ascontiguousarray(real, dtype=np.float64)
    cdef double[:, ::1] g = np.ascontiguousarray(gen, dtype=np.float64)
    cdef double[::1] rad = np.ascontiguousarray(radii, dtype=np.float64)
    cdef Py_ssize_t n = r.shape[0], m = g.shape[0], dim = r.shape[1], i, j, c
    hits_arr = np.zeros(m, dtype=np.int64)
    cov_arr = np.zeros(n, dtype=np.uint8)
    cdef long long[::1] hits = hits_arr
    cdef unsigned char[::1] cov = cov_arr
    cdef double d2, diff
    with nogil:
        for j in range(m):
            for i in range(n):
                d2 = 0.0
                for c in range(dim):
                    diff = g[j, c] - r[i, c]
                    d2 += diff * diff
                if sqrt(d2) <= rad[i]:
                    hits[j] += 1
                    cov[i] = 1
    return hits_arr, cov_arr.astype(bool)
