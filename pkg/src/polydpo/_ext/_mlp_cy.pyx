# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled MLP kernel: BLAS dgemm for the dense layers, fused loops for
bias, SiLU and its derivative. Same signatures as ``_mlp_py``."""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _matmul(const double[:, ::1] a, const double[:, ::1] w, double[:, ::1] out) noexcept nogil:
    # out (n, m) = a (n, k) @ w (k, m), all row-major
    cdef int n = a.shape[0], k = a.shape[1], m = w.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char nn = b'N'
    if n == 0 or m == 0:
        return
    if k == 0:
        out[:, :] = 0.0
        return
    dgemm(&nn, &nn, &m, &n, &k, &one, <double*>&w[0, 0], &m, <double*>&a[0, 0], &k, &zero, &out[0, 0], &m)


cdef void _matmul_at_b(const double[:, ::1] a, double[:, ::1] d, double[:, ::1] out) noexcept nogil:
    # out (k, m) = a.T (k, n) @ d (n, m)
    cdef int n = a.shape[0], k = a.shape[1], m = d.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char nn = b'N', tt = b'T'
    if n == 0:
        out[:, :] = 0.0
        return
    dgemm(&nn, &tt, &m, &k, &n, &one, &d[0, 0], &m, <double*>&a[0, 0], &k, &zero, &out[0, 0], &m)


cdef void _matmul_b_wt(double[:, ::1] d, const double[:, ::1] w, double[:, ::1] out) noexcept nogil:
    # out (n, k) = d (n, m) @ w.T (m, k)
    cdef int n = d.shape[0], m = d.shape[1], k = w.shape[0]
    cdef double one = 1.0, zero = 0.0
    cdef char nn = b'N', tt = b'T'
    if n == 0 or k == 0:
        return
    dgemm(&tt, &nn, &k, &n, &m, &one, <double*>&w[0, 0], &m, &d[0, 0], &m, &zero, &out[0, 0], &k)


def mlp_forward(h0, weights, biases):
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t li, i, j, n
    cdef const double[:, ::1] h = np.ascontiguousarray(h0, dtype=np.float64)
    cdef double[:, ::1] z
    cdef double[:, ::1] a
    cdef const double[::1] b
    cdef double[:, ::1] sv
    cdef double sij
    acts = [np.asarray(h)]
    pre = []
    sig = []
    n = h.shape[0]
    for li in range(n_layers):
        w = weights[li]
        b = biases[li]
        z_arr = np.empty((n, w.shape[1]), dtype=np.float64)
        z = z_arr
        _matmul(h, w, z)
        if li == n_layers - 1:
            with nogil:
                for i in range(n):
                    for j in range(z.shape[1]):
                        z[i, j] += b[j]
            h = z
        else:
            with nogil:
                for i in range(n):
                    for j in range(z.shape[1]):
                        z[i, j] += b[j]
            # vectorised tanh is an order of magnitude faster than libm's
            s_arr = np.tanh(np.multiply(z_arr, 0.5))
            sv = s_arr
            a_arr = np.empty_like(z_arr)
            a = a_arr
            with nogil:
                for i in range(n):
                    for j in range(z.shape[1]):
                        sij = 0.5 * (1.0 + sv[i, j])
                        sv[i, j] = sij
                        a[i, j] = z[i, j] * sij
            pre.append(z_arr)
            sig.append(s_arr)
            acts.append(a_arr)
            h = a
    return np.asarray(h), (acts, pre, sig)


def mlp_predict(h0, weights, biases):
    return mlp_forward(h0, weights, biases)[0]


def mlp_backward(cache, weights, grad_out):
    acts, pre, sig = cache
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t li, i, j, n
    cdef double[:, ::1] dz = np.array(grad_out, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] dh
    cdef const double[:, ::1] z
    cdef const double[:, ::1] sv
    cdef double[:, ::1] gwv
    cdef double[::1] gbv
    cdef double s, zij, acc
    n = dz.shape[0]
    gw = [None] * n_layers
    gb = [None] * n_layers
    for li in range(n_layers - 1, -1, -1):
        w = weights[li]
        a = acts[li]
        gw_arr = np.empty((w.shape[0], w.shape[1]), dtype=np.float64)
        gwv = gw_arr
        _matmul_at_b(a, dz, gwv)
        gb_arr = np.zeros(w.shape[1], dtype=np.float64)
        gbv = gb_arr
        with nogil:
            for i in range(n):
                for j in range(dz.shape[1]):
                    gbv[j] += dz[i, j]
        gw[li] = gw_arr
        gb[li] = gb_arr
        dh_arr = np.empty((n, w.shape[0]), dtype=np.float64)
        dh = dh_arr
        _matmul_b_wt(dz, w, dh)
        if li > 0:
            z = pre[li - 1]
            sv = sig[li - 1]
            with nogil:
                for i in range(n):
                    for j in range(dh.shape[1]):
                        zij = z[i, j]
                        s = sv[i, j]
                        dh[i, j] = dh[i, j] * (s * (1.0 + zij * (1.0 - s)))
        dz = dh
    return gw, gb, np.asarray(dz)
