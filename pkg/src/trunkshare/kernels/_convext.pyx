# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled conv kernels (direct loops, single-threaded, deterministic).

Drop-in replacements for the conv functions in pykernels; selected at import
by trunkshare.kernels when available.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv_forward(cnp.ndarray x_arr, cnp.ndarray w_arr, int stride, int pad):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_arr)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_arr)
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, cout, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, c, i, j, p, q, yy, xx
    cdef double acc
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for p in range(kh):
                            yy = i * stride + p - pad
                            if yy < 0 or yy >= h:
                                continue
                            for q in range(kw):
                                xx = j * stride + q - pad
                                if xx < 0 or xx >= wd:
                                    continue
                                acc += x[b, c, yy, xx] * w[o, c, p, q]
                    out[b, o, i, j] = acc
    return out_arr


def conv_backward_weight(cnp.ndarray x_arr, cnp.ndarray gy_arr, int stride,
                         int pad, int kh, int kw):
    cdef double[:, :, :, ::1] x = np.ascontiguousarray(x_arr)
    cdef double[:, :, :, ::1] gy = np.ascontiguousarray(gy_arr)
    cdef Py_ssize_t n = x.shape[0], cin = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cout = gy.shape[1], ho = gy.shape[2], wo = gy.shape[3]
    gw_arr = np.zeros((cout, cin, kh, kw))
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, o, c, i, j, p, q, yy, xx
    cdef double g
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    g = gy[b, o, i, j]
                    if g == 0.0:
                        continue
                    for c in range(cin):
                        for p in range(kh):
                            yy = i * stride + p - pad
                            if yy < 0 or yy >= h:
                                continue
                            for q in range(kw):
                                xx = j * stride + q - pad
                                if xx < 0 or xx >= wd:
                                    continue
                                gw[o, c, p, q] += x[b, c, yy, xx] * g
    return gw_arr


def conv_backward_input(cnp.ndarray gy_arr, cnp.ndarray w_arr, int stride,
                        int pad, int h, int wd):
    cdef double[:, :, :, ::1] gy = np.ascontiguousarray(gy_arr)
    cdef double[:, :, :, ::1] w = np.ascontiguousarray(w_arr)
    cdef Py_ssize_t n = gy.shape[0], cout = gy.shape[1]
    cdef Py_ssize_t ho = gy.shape[2], wo = gy.shape[3]
    cdef Py_ssize_t cin = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    gx_arr = np.zeros((n, cin, h, wd))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, o, c, i, j, p, q, yy, xx
    cdef double g
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    g = gy[b, o, i, j]
                    if g == 0.0:
                        continue
                    for c in range(cin):
                        for p in range(kh):
                            yy = i * stride + p - pad
                            if yy < 0 or yy >= h:
                                continue
                            for q in range(kw):
                                xx = j * stride + q - pad
                                if xx < 0 or xx >= wd:
                                    continue
                                gx[b, c, yy, xx] += w[o, c, p, q] * g
    return gx_arr
