# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: hash-grid encoding and fused softplus.

Semantics match kernels._reference exactly (same hash, corner order and
accumulation order); the reference is the oracle in tests.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, floor, log1p

cnp.import_array()

cdef unsigned long long P1 = 1ULL
cdef unsigned long long P2 = 2654435761ULL
cdef unsigned long long P3 = 805459861ULL


def hash_encode_forward(double[:, ::1] pts, double[:, :, ::1] tables,
                        long[::1] res, int active_levels):
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t levels = tables.shape[0]
    cdef Py_ssize_t table_size = tables.shape[1]
    cdef Py_ssize_t feat = tables.shape[2]
    cdef int active = active_levels if active_levels < levels else <int>levels

    feats_arr = np.zeros((n, levels * feat), dtype=np.float64)
    corners_arr = np.zeros((n, active, 8), dtype=np.int32)
    weights_arr = np.zeros((n, active, 8), dtype=np.float64)
    cdef double[:, ::1] feats = feats_arr
    cdef int[:, :, ::1] corners = corners_arr
    cdef double[:, :, ::1] weights = weights_arr

    cdef Py_ssize_t lv, i, c, f
    cdef double r, px, py, pz, cx, cy, cz, fx, fy, fz, w, wx, wy, wz
    cdef unsigned long long ix, iy, iz, h, mask
    cdef int ox, oy, oz, idx
    mask = <unsigned long long>(table_size - 1)

    for lv in range(active):
        r = <double>res[lv]
        for i in range(n):
            px = pts[i, 0] * r
            py = pts[i, 1] * r
            pz = pts[i, 2] * r
            cx = floor(px)
            cy = floor(py)
            cz = floor(pz)
            if cx < 0: cx = 0
            if cy < 0: cy = 0
            if cz < 0: cz = 0
            if cx > r - 1: cx = r - 1
            if cy > r - 1: cy = r - 1
            if cz > r - 1: cz = r - 1
            fx = px - cx
            fy = py - cy
            fz = pz - cz
            ix = <unsigned long long>cx
            iy = <unsigned long long>cy
            iz = <unsigned long long>cz
            for c in range(8):
                ox = <int>(c & 1)
                oy = <int>((c >> 1) & 1)
                oz = <int>((c >> 2) & 1)
                h = ((ix + <unsigned long long>ox) * P1) ^ \
                    ((iy + <unsigned long long>oy) * P2) ^ \
                    ((iz + <unsigned long long>oz) * P3)
                idx = <int>(h & mask)
                wx = fx if ox else 1.0 - fx
                wy = fy if oy else 1.0 - fy
                wz = fz if oz else 1.0 - fz
                w = (wx * wy) * wz
                corners[i, lv, c] = idx
                weights[i, lv, c] = w
                for f in range(feat):
                    feats[i, lv * feat + f] += w * tables[lv, idx, f]
    return feats_arr, corners_arr, weights_arr


def hash_encode_backward(double[:, ::1] grad_feats, int[:, :, ::1] corners,
                         double[:, :, ::1] weights, Py_ssize_t levels,
                         Py_ssize_t table_size, Py_ssize_t feat):
    cdef Py_ssize_t n = corners.shape[0]
    cdef Py_ssize_t active = corners.shape[1]
    grad_arr = np.zeros((levels, table_size, feat), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad_arr
    cdef Py_ssize_t lv, i, c, f
    cdef int idx
    cdef double w
    for lv in range(active):
        for i in range(n):
            for c in range(8):
                idx = corners[i, lv, c]
                w = weights[i, lv, c]
                for f in range(feat):
                    grad[lv, idx, f] += w * grad_feats[i, lv * feat + f]
    return grad_arr


def softplus_forward(object x):
    x_arr = np.ascontiguousarray(x, dtype=np.float64)
    shape = x_arr.shape
    flat = x_arr.reshape(-1)
    y_arr = np.empty_like(flat)
    s_arr = np.empty_like(flat)
    cdef double[::1] xv = flat
    cdef double[::1] yv = y_arr
    cdef double[::1] sv = s_arr
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double v, e
    for i in range(n):
        v = xv[i]
        e = exp(-fabs(v))
        yv[i] = (v if v > 0.0 else 0.0) + log1p(e)
        if v >= 0.0:
            sv[i] = 1.0 / (1.0 + e)
        else:
            sv[i] = e / (1.0 + e)
    return y_arr.reshape(shape), s_arr.reshape(shape)
