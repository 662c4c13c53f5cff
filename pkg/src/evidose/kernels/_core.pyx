# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for stride-1 3D convolution and 2x max pooling.

Same contracts as `numpy_backend`; loops are arranged so the innermost index
runs over the contiguous W axis with per-tap precomputed valid ranges, which
keeps the hot loops branch-free and auto-vectorizable.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def conv3d_forward(real[:, :, :, ::1] x, real[:, :, :, :, ::1] w, real[::1] b, int pad):
    cdef Py_ssize_t Cin = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], KD = w.shape[2], KH = w.shape[3], KW = w.shape[4]
    cdef Py_ssize_t Do = D + 2 * pad - KD + 1
    cdef Py_ssize_t Ho = H + 2 * pad - KH + 1
    cdef Py_ssize_t Wo = W + 2 * pad - KW + 1

    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((Cout, Do, Ho, Wo), dtype=dtype)
    cdef real[:, :, :, ::1] y = y_arr

    cdef Py_ssize_t co, ci, a, e, c, d, h, i
    cdef Py_ssize_t od, oh, ow, d0, d1, h0, h1, w0, w1
    cdef real wv, bv

    for co in range(Cout):
        bv = b[co]
        for d in range(Do):
            for h in range(Ho):
                for i in range(Wo):
                    y[co, d, h, i] = bv
        for ci in range(Cin):
            for a in range(KD):
                od = a - pad
                d0 = max(0, -od); d1 = min(Do, D - od)
                for e in range(KH):
                    oh = e - pad
                    h0 = max(0, -oh); h1 = min(Ho, H - oh)
                    for c in range(KW):
                        ow = c - pad
                        w0 = max(0, -ow); w1 = min(Wo, W - ow)
                        wv = w[co, ci, a, e, c]
                        for d in range(d0, d1):
                            for h in range(h0, h1):
                                for i in range(w0, w1):
                                    y[co, d, h, i] += wv * x[ci, d + od, h + oh, i + ow]
    return y_arr


def conv3d_backward(real[:, :, :, ::1] x, real[:, :, :, :, ::1] w,
                    real[:, :, :, ::1] gy, int pad, bint need_input_grad=True):
    cdef Py_ssize_t Cin = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = w.shape[0], KD = w.shape[2], KH = w.shape[3], KW = w.shape[4]
    cdef Py_ssize_t Do = gy.shape[1], Ho = gy.shape[2], Wo = gy.shape[3]

    dtype = np.float32 if real is float else np.float64
    gw64_arr = np.zeros((Cout, Cin, KD, KH, KW), dtype=np.float64)
    gb64_arr = np.zeros(Cout, dtype=np.float64)
    cdef double[:, :, :, :, ::1] gw64 = gw64_arr
    cdef double[::1] gb64 = gb64_arr

    gx_arr = np.zeros((Cin, D, H, W), dtype=dtype) if need_input_grad else None
    cdef real[:, :, :, ::1] gx
    if need_input_grad:
        gx = gx_arr

    cdef Py_ssize_t co, ci, a, e, c, d, h, i
    cdef Py_ssize_t od, oh, ow, d0, d1, h0, h1, w0, w1
    cdef real wv
    cdef double acc

    for co in range(Cout):
        acc = 0.0
        for d in range(Do):
            for h in range(Ho):
                for i in range(Wo):
                    acc += gy[co, d, h, i]
        gb64[co] = acc
        for ci in range(Cin):
            for a in range(KD):
                od = a - pad
                d0 = max(0, -od); d1 = min(Do, D - od)
                for e in range(KH):
                    oh = e - pad
                    h0 = max(0, -oh); h1 = min(Ho, H - oh)
                    for c in range(KW):
                        ow = c - pad
                        w0 = max(0, -ow); w1 = min(Wo, W - ow)
                        acc = 0.0
                        for d in range(d0, d1):
                            for h in range(h0, h1):
                                for i in range(w0, w1):
                                    acc += gy[co, d, h, i] * x[ci, d + od, h + oh, i + ow]
                        gw64[co, ci, a, e, c] = acc
                        if need_input_grad:
                            wv = w[co, ci, a, e, c]
                            for d in range(d0, d1):
                                for h in range(h0, h1):
                                    for i in range(w0, w1):
                                        gx[ci, d + od, h + oh, i + ow] += wv * gy[co, d, h, i]
    gw_arr = gw64_arr.astype(dtype)
    gb_arr = gb64_arr.astype(dtype)
    return gx_arr, gw_arr, gb_arr


def maxpool3d_forward(real[:, :, :, ::1] x, int window):
    cdef Py_ssize_t C = x.shape[0], D = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n = window
    cdef Py_ssize_t D2 = D // n, H2 = H // n, W2 = W // n

    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((C, D2, H2, W2), dtype=dtype)
    idx_arr = np.empty((C, D2, H2, W2), dtype=np.int64)
    cdef real[:, :, :, ::1] y = y_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr

    cdef Py_ssize_t ch, d2, h2, w2, dd, hh, ww, di, hi, wi
    cdef real best, v
    cdef cnp.int64_t bi

    for ch in range(C):
        for d2 in range(D2):
            for h2 in range(H2):
                for w2 in range(W2):
                    best = x[ch, d2 * n, h2 * n, w2 * n]
                    bi = (d2 * n * H + h2 * n) * W + w2 * n
                    for dd in range(n):
                        di = d2 * n + dd
                        for hh in range(n):
                            hi = h2 * n + hh
                            for ww in range(n):
                                wi = w2 * n + ww
                                v = x[ch, di, hi, wi]
                                if v > best:  # strict: first index wins ties
                                    best = v
                                    bi = (di * H + hi) * W + wi
                    y[ch, d2, h2, w2] = best
                    idx[ch, d2, h2, w2] = bi
    return y_arr, idx_arr


def maxpool3d_backward(real[:, :, :, ::1] gy, cnp.int64_t[:, :, :, ::1] idx, spatial_shape):
    cdef Py_ssize_t D = spatial_shape[0], H = spatial_shape[1], W = spatial_shape[2]
    cdef Py_ssize_t C = gy.shape[0]
    cdef Py_ssize_t D2 = gy.shape[1], H2 = gy.shape[2], W2 = gy.shape[3]

    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((C, D, H, W), dtype=dtype)
    cdef real[:, ::1] gx = gx_arr.reshape(C, D * H * W)

    cdef Py_ssize_t ch, d2, h2, w2
    for ch in range(C):
        for d2 in range(D2):
            for h2 in range(H2):
                for w2 in range(W2):
                    gx[ch, idx[ch, d2, h2, w2]] += gy[ch, d2, h2, w2]
    return gx_arr
