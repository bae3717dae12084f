# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the row kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY

cnp.import_array()


def ce_rows(double[:, ::1] z, cnp.int64_t[::1] y, bint penalty=False):
    cdef Py_ssize_t n = z.shape[0], c = z.shape[1]
    cdef Py_ssize_t i, j, top
    cdef double zmax, tail, inv, pz, gw_i, pj
    nll_a = np.empty(n, dtype=np.float64)
    dz_a = np.empty((n, c), dtype=np.float64)
    cdef double[::1] nll = nll_a
    cdef double[:, ::1] dz = dz_a
    cdef double[::1] gw
    cdef double[:, ::1] dgw
    gw_a = None
    dgw_a = None
    if penalty:
        gw_a = np.empty(n, dtype=np.float64)
        dgw_a = np.empty((n, c), dtype=np.float64)
        gw = gw_a
        dgw = dgw_a
    with nogil:
        for i in range(n):
            top = 0
            zmax = z[i, 0]
            for j in range(1, c):
                if z[i, j] > zmax:
                    zmax = z[i, j]
                    top = j
            tail = 0.0
            for j in range(c):
                if j != top:
                    dz[i, j] = exp(z[i, j] - zmax)
                    tail = tail + dz[i, j]
                else:
                    dz[i, j] = 1.0
            nll[i] = zmax + log1p(tail) - z[i, y[i]]
            inv = 1.0 / (1.0 + tail)
            for j in range(c):
                dz[i, j] = dz[i, j] * inv
            if penalty:
                pz = 0.0
                for j in range(c):
                    pz = pz + dz[i, j] * z[i, j]
            dz[i, y[i]] = dz[i, y[i]] - 1.0
            if penalty:
                gw_i = 0.0
                for j in range(c):
                    gw_i = gw_i + dz[i, j] * z[i, j]
                gw[i] = gw_i
                for j in range(c):
                    pj = dz[i, j]
                    if j == y[i]:
                        pj = pj + 1.0
                    dgw[i, j] = dz[i, j] + pj * (z[i, j] - pz)
    return nll_a, dz_a, gw_a, dgw_a


def causal_softmax(s_in):
    s_arr = np.ascontiguousarray(s_in, dtype=np.float64)
    shape = s_arr.shape
    t_py = shape[len(shape) - 1]
    out_a = np.zeros(shape, dtype=np.float64)
    _causal_softmax(s_arr.reshape(-1, t_py, t_py), out_a.reshape(-1, t_py, t_py))
    return out_a


cdef void _causal_softmax(double[:, :, ::1] s, double[:, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t nb = s.shape[0], t = s.shape[1]
    cdef Py_ssize_t b, r, k
    cdef double m, tot
    for b in range(nb):
        for r in range(t):
            m = s[b, r, 0]
            for k in range(1, r + 1):
                if s[b, r, k] > m:
                    m = s[b, r, k]
            tot = 0.0
            for k in range(r + 1):
                out[b, r, k] = exp(s[b, r, k] - m)
                tot = tot + out[b, r, k]
            for k in range(r + 1):
                out[b, r, k] = out[b, r, k] / tot


def causal_softmax_backward(att_in, datt_in):
    att_arr = np.ascontiguousarray(att_in, dtype=np.float64)
    datt_arr = np.ascontiguousarray(datt_in, dtype=np.float64)
    shape = att_arr.shape
    t_py = shape[len(shape) - 1]
    out_a = np.zeros(shape, dtype=np.float64)
    _causal_softmax_backward(att_arr.reshape(-1, t_py, t_py), datt_arr.reshape(-1, t_py, t_py),
                             out_a.reshape(-1, t_py, t_py))
    return out_a


cdef void _causal_softmax_backward(double[:, :, ::1] att, double[:, :, ::1] datt,
                                   double[:, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t nb = att.shape[0], t = att.shape[1]
    cdef Py_ssize_t b, r, k
    cdef double inner
    for b in range(nb):
        for r in range(t):
            inner = 0.0
            for k in range(r + 1):
                inner = inner + att[b, r, k] * datt[b, r, k]
            for k in range(r + 1):
                out[b, r, k] = att[b, r, k] * (datt[b, r, k] - inner)



cdef double GELU_K = 0.7978845608028654


def gelu(u_in):
    u_arr = np.ascontiguousarray(u_in, dtype=np.float64)
    out_a = np.empty_like(u_arr)
    t_a = np.empty_like(u_arr)
    _gelu(u_arr.reshape(-1), out_a.reshape(-1), t_a.reshape(-1))
    return out_a, t_a


cdef void _gelu(double[::1] u, double[::1] out, double[::1] t) noexcept nogil:
    cdef Py_ssize_t i, n = u.shape[0]
    cdef double x, th
    for i in range(n):
        x = u[i]
        # tanh via exp: glibc exp is several times cheaper than tanh
        th = 1.0 - 2.0 / (exp(2.0 * GELU_K * (x + 0.044715 * (x * x * x))) + 1.0)
        t[i] = th
        out[i] = 0.5 * x * (1.0 + th)


def gelu_backward(dout_in, u_in, t_in):
    d_arr = np.ascontiguousarray(dout_in, dtype=np.float64)
    u_arr = np.ascontiguousarray(u_in, dtype=np.float64)
    t_arr = np.ascontiguousarray(t_in, dtype=np.float64)
    out_a = np.empty_like(u_arr)
    _gelu_backward(d_arr.reshape(-1), u_arr.reshape(-1), t_arr.reshape(-1), out_a.reshape(-1))
    return out_a


cdef void _gelu_backward(double[::1] d, double[::1] u, double[::1] t,
                         double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = u.shape[0]
    cdef double x, th
    for i in range(n):
        x = u[i]
        th = t[i]
        out[i] = d[i] * (0.5 * (1.0 + th)
                         + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 0.134145 * (x * x)))
