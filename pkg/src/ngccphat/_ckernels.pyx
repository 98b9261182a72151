# cython: boundscheck=False, wraparound=False, cdivision=True
"""Hot 1D convolution kernels (forward, input gradient, weight gradient).

Inputs are halo-padded up front (wrapped for circular mode, zeros
otherwise) so the inner loops are branch-free sweeps the compiler can
vectorize. Each output element accumulates contributions in a fixed
(channel, tap) order, so circular convolution commutes with integer
circular shifts bit-exactly.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def _halo_pad(arr, Py_ssize_t half, bint circular):
    n = arr.shape[1]
    out = np.zeros((arr.shape[0], n + 2 * half), dtype=np.float64)
    out[:, half : half + n] = arr
    if circular and half > 0:
        out[:, :half] = arr[:, n - half :]
        out[:, half + n :] = arr[:, :half]
    return out


def conv1d_forward(x, w, bint circular):
    """y[o, n] = sum_{c,t} w[o, c, t] * x[c, n + t - T//2]."""
    cdef double[:, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t cout = wv.shape[0], cin = wv.shape[1], taps = wv.shape[2]
    cdef Py_ssize_t half = taps // 2
    cdef Py_ssize_t n_len = x.shape[1]
    cdef double[:, ::1] xp = _halo_pad(np.asarray(x, dtype=np.float64), half, circular)
    y_arr = np.zeros((cout, n_len), dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef Py_ssize_t o, c, t, n
    cdef double coef
    with nogil:
        for o in range(cout):
            for c in range(cin):
                for t in range(taps):
                    coef = wv[o, c, t]
                    for n in range(n_len):
                        y[o, n] += coef * xp[c, n + t]
    return y_arr


def conv1d_grad_input(gy, w, bint circular):
    """gx[c, m] = sum_{o,t} w[o, c, t] * gy[o, m - t + T//2]."""
    cdef double[:, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t cout = wv.shape[0], cin = wv.shape[1], taps = wv.shape[2]
    cdef Py_ssize_t half = taps // 2
    cdef Py_ssize_t n_len = gy.shape[1]
    cdef double[:, ::1] gp = _halo_pad(np.asarray(gy, dtype=np.float64), half, circular)
    gx_arr = np.zeros((cin, n_len), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef Py_ssize_t o, c, t, m
    cdef double coef
    with nogil:
        for c in range(cin):
            for o in range(cout):
                for t in range(taps):
                    coef = wv[o, c, t]
                    # gy[o, m - t + half] = gp[o, m + 2*half - t]
                    for m in range(n_len):
                        gx[c, m] += coef * gp[o, m + 2 * half - t]
    return gx_arr


def conv1d_grad_weights(x, gy, Py_ssize_t taps, bint circular):
    """gw[o, c, t] = sum_n gy[o, n] * x[c, n + t - T//2]."""
    cdef Py_ssize_t half = taps // 2
    cdef Py_ssize_t cin = x.shape[0], n_len = x.shape[1]
    cdef Py_ssize_t cout = gy.shape[0]
    cdef double[:, ::1] xp = _halo_pad(np.asarray(x, dtype=np.float64), half, circular)
    cdef double[:, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    gw_arr = np.zeros((cout, cin, taps), dtype=np.float64)
    cdef double[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t o, c, t, n
    cdef double a0, a1, a2, a3
    cdef Py_ssize_t n4 = n_len - (n_len & 3)
    with nogil:
        for o in range(cout):
            for c in range(cin):
                for t in range(taps):
                    # four partial sums keep the reduction pipelined
                    a0 = a1 = a2 = a3 = 0.0
                    for n in range(0, n4, 4):
                        a0 += gv[o, n] * xp[c, n + t]
                        a1 += gv[o, n + 1] * xp[c, n + 1 + t]
                        a2 += gv[o, n + 2] * xp[c, n + 2 + t]
                        a3 += gv[o, n + 3] * xp[c, n + 3 + t]
                    for n in range(n4, n_len):
                        a0 += gv[o, n] * xp[c, n + t]
                    gw[o, c, t] = (a0 + a1) + (a2 + a3)
    return gw_arr
