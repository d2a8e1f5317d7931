# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the stencil and coreset loops.

Same signatures and accumulation order as ``_reference``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, fabs, INFINITY

cnp.import_array()


def sharing_weights(double[:, :, ::1] x, int ks, double sigma0, double sigma1):
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], nc = x.shape[2]
    cdef Py_ssize_t side = 2 * ks + 1, nk = side * side
    out_arr = np.zeros((h, w, nk))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, c, ii, jj
    cdef int di, dj
    cdef double col, diff, total
    for i in range(h):
        for j in range(w):
            k = 0
            for di in range(-ks, ks + 1):
                for dj in range(-ks, ks + 1):
                    ii = i + di
                    jj = j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        col = 0.0
                        for c in range(nc):
                            diff = x[ii, jj, c] - x[i, j, c]
                            col = col + diff * diff
                        out[i, j, k] = exp(-(di * di + dj * dj) / sigma0) * exp(-col / sigma1)
                    k += 1
            total = 0.0
            for k in range(nk):
                total = total + out[i, j, k]
            for k in range(nk):
                out[i, j, k] = out[i, j, k] / total
    return out_arr


def share(double[:, :, ::1] weights, double[:, :, ::1] grad, int ks):
    cdef Py_ssize_t h = grad.shape[0], w = grad.shape[1], nc = grad.shape[2]
    g_arr = np.zeros((h, w, nc))
    cdef double[:, :, ::1] g = g_arr
    cdef Py_ssize_t i, j, k, c, ii, jj
    cdef int di, dj
    cdef double wk
    for i in range(h):
        for j in range(w):
            k = 0
            for di in range(-ks, ks + 1):
                for dj in range(-ks, ks + 1):
                    ii = i + di
                    jj = j + dj
                    if 0 <= ii < h and 0 <= jj < w:
                        wk = weights[i, j, k]
                        for c in range(nc):
                            g[i, j, c] = g[i, j, c] + wk * grad[ii, jj, c]
                    k += 1
    return g_arr


def jacobi_inpaint(x, mask, double tol, int max_iter):
    n_arr = np.array(x, dtype=np.float64, order="C")
    mask_arr = np.ascontiguousarray(mask, dtype=np.uint8)
    if not mask_arr.any():
        return n_arr, 0
    known = mask_arr == 0
    n_arr[mask_arr.astype(bool)] = n_arr[known].mean(axis=0)
    cdef double[:, :, ::1] n = n_arr
    cdef cnp.uint8_t[:, ::1] m = mask_arr
    cdef Py_ssize_t h = n.shape[0], w = n.shape[1], nc = n.shape[2]
    # masked pixel coordinates, row-major
    idx = np.argwhere(mask_arr.astype(bool))
    cdef Py_ssize_t[:, ::1] pix = np.ascontiguousarray(idx, dtype=np.intp)
    cdef Py_ssize_t npix = pix.shape[0]
    new_arr = np.empty((npix, nc))
    cdef double[:, ::1] new = new_arr
    cdef Py_ssize_t p, i, j, c
    cdef double acc, cnt, delta, d
    cdef int it = 0
    while it < max_iter:
        delta = 0.0
        for p in range(npix):
            i = pix[p, 0]
            j = pix[p, 1]
            cnt = 0.0
            if i > 0:
                cnt += 1.0
            if i < h - 1:
                cnt += 1.0
            if j > 0:
                cnt += 1.0
            if j < w - 1:
                cnt += 1.0
            for c in range(nc):
                acc = 0.0
                # same neighbour order as the numpy version: up, down, left, right
                if i > 0:
                    acc = acc + n[i - 1, j, c]
                if i < h - 1:
                    acc = acc + n[i + 1, j, c]
                if j > 0:
                    acc = acc + n[i, j - 1, c]
                if j < w - 1:
                    acc = acc + n[i, j + 1, c]
                new[p, c] = acc / cnt
                d = fabs(new[p, c] - n[i, j, c])
                if d > delta:
                    delta = d
        for p in range(npix):
            for c in range(nc):
                n[pix[p, 0], pix[p, 1], c] = new[p, c]
        it += 1
        if delta < tol:
            break
    return n_arr, it


def farthest_point(features, Py_ssize_t m, Py_ssize_t start):
    feats_arr = np.ascontiguousarray(features, dtype=np.float64)
    cdef double[:, ::1] f = feats_arr
    cdef Py_ssize_t npts = f.shape[0], dim = f.shape[1]
    sel_arr = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] sel = sel_arr
    mind_arr = np.empty(npts)
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t t, i, c, nxt
    cdef double acc, diff, best
    sel[0] = start
    nxt = start
    for i in range(npts):
        acc = 0.0
        for c in range(dim):
            diff = f[i, c] - f[nxt, c]
            acc = acc + diff * diff
        mind[i] = acc
    mind[start] = -INFINITY
    for t in range(1, m):
        best = -INFINITY
        nxt = 0
        for i in range(npts):
            if mind[i] > best:
                best = mind[i]
                nxt = i
        sel[t] = nxt
        for i in range(npts):
            acc = 0.0
            for c in range(dim):
                diff = f[i, c] - f[nxt, c]
                acc = acc + diff * diff
            if acc < mind[i]:
                mind[i] = acc
        mind[nxt] = -INFINITY
    return sel_arr
