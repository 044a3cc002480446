# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (stride 1, zero-padded "same", odd kernels).

Row-blocked direct accumulation: each output row is accumulated across all
(channel, tap) contributions while it stays in cache. Deterministic order for
a given build; not bit-identical to the BLAS-backed numpy fallback.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(x, w, bias):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t F = wv.shape[0], KH = wv.shape[2], KW = wv.shape[3]
    cdef Py_ssize_t ph = KH // 2, pw = KW // 2
    y = np.zeros((B, F, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] yv = y
    cdef double[::1] bv
    cdef Py_ssize_t b, f, c, i, j, u, v, ii, jj, j0, j1
    cdef double wk, bf
    for b in range(B):
        for f in range(F):
            for c in range(C):
                for u in range(KH):
                    ii = u - ph
                    for v in range(KW):
                        jj = v - pw
                        wk = wv[f, c, u, v]
                        j0 = max(0, -jj)
                        j1 = min(W, W - jj)
                        for i in range(max(0, -ii), min(H, H - ii)):
                            for j in range(j0, j1):
                                yv[b, f, i, j] += wk * xv[b, c, i + ii, j + jj]
    if bias is not None:
        bv = np.ascontiguousarray(bias, dtype=np.float64)
        for b in range(B):
            for f in range(F):
                bf = bv[f]
                for i in range(H):
                    for j in range(W):
                        yv[b, f, i, j] += bf
    return y


def conv2d_backward(x, w, gy):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[:, :, :, ::1] gyv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t F = wv.shape[0], KH = wv.shape[2], KW = wv.shape[3]
    cdef Py_ssize_t ph = KH // 2, pw = KW // 2
    gx = np.zeros((B, C, H, W), dtype=np.float64)
    gw = np.zeros((F, C, KH, KW), dtype=np.float64)
    gb = np.zeros(F, dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    cdef double[:, :, :, ::1] gwv = gw
    cdef double[::1] gbv = gb
    cdef Py_ssize_t b, f, c, i, j, u, v, ii, jj, j0, j1
    cdef double acc, wk
    # bias gradient
    for b in range(B):
        for f in range(F):
            acc = 0.0
            for i in range(H):
                for j in range(W):
                    acc += gyv[b, f, i, j]
            gbv[f] += acc
    # weight gradient: per-row dot products
    for b in range(B):
        for f in range(F):
            for c in range(C):
                for u in range(KH):
                    for v in range(KW):
                        jj = v - pw
                        j0 = max(0, -jj)
                        j1 = min(W, W - jj)
                        acc = 0.0
                        for i in range(max(0, ph - u), min(H, H + ph - u)):
                            ii = i + u - ph
                            for j in range(j0, j1):
                                acc += gyv[b, f, i, j] * xv[b, c, ii, j + jj]
                        gwv[f, c, u, v] += acc
    # input gradient: full correlation, per-tap sweeps
    for b in range(B):
        for c in range(C):
            for f in range(F):
                for u in range(KH):
                    ii = u - ph
                    for v in range(KW):
                        jj = v - pw
                        wk = wv[f, c, u, v]
                        j0 = max(0, jj)
                        j1 = min(W, W + jj)
                        for i in range(max(0, ii), min(H, H + ii)):
                            for j in range(j0, j1):
                                gxv[b, c, i, j] += wk * gyv[b, f, i - ii, j - jj]
    return gx, gw, gb
