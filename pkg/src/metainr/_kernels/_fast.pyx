# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core.

Mirrors ``numpy_backend`` function for function. All inputs are C-contiguous
float64 arrays; matrix products call BLAS dgemm directly, everything else is
a flat loop.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos as c_cos
from libc.math cimport sin as c_sin
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

ctypedef cnp.float64_t f64


def matmul(cnp.ndarray a, cnp.ndarray b, bint trans_a=False, bint trans_b=False):
    """Row-major ``op(a) @ op(b)`` via column-major dgemm on swapped operands."""
    cdef int m = <int> (a.shape[1] if trans_a else a.shape[0])
    cdef int k = <int> (a.shape[0] if trans_a else a.shape[1])
    cdef int n = <int> (b.shape[0] if trans_b else b.shape[1])
    cdef cnp.ndarray out = np.empty((m, n), dtype=np.float64)
    if m == 0 or n == 0:
        return out
    if k == 0:
        out[...] = 0.0
        return out
    cdef f64[:, ::1] av = a
    cdef f64[:, ::1] bv = b
    cdef f64[:, ::1] ov = out
    cdef char ta = b'T' if trans_a else b'N'
    cdef char tb = b'T' if trans_b else b'N'
    cdef int lda = <int> a.shape[1]
    cdef int ldb = <int> b.shape[1]
    cdef int ldc = n
    cdef f64 alpha = 1.0, beta = 0.0
    with nogil:
        dgemm(&tb, &ta, &n, &m, &k, &alpha,
              &bv[0, 0], &ldb, &av[0, 0], &lda, &beta, &ov[0, 0], &ldc)
    return out


cdef inline f64[::1] _flat(cnp.ndarray x):
    return x.reshape(-1)


def add(cnp.ndarray x, cnp.ndarray y):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] xv = _flat(x), yv = _flat(y), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] + yv[i]
    return out


def sub(cnp.ndarray x, cnp.ndarray y):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] xv = _flat(x), yv = _flat(y), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] - yv[i]
    return out


def mul(cnp.ndarray x, cnp.ndarray y):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] xv = _flat(x), yv = _flat(y), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] * yv[i]
    return out


def add_row(cnp.ndarray x, cnp.ndarray r):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[:, ::1] xv = x, ov = out
    cdef f64[::1] rv = r
    cdef Py_ssize_t i, j, n = xv.shape[0], d = xv.shape[1]
    with nogil:
        for i in range(n):
            for j in range(d):
                ov[i, j] = xv[i, j] + rv[j]
    return out


def mul_row(cnp.ndarray x, cnp.ndarray r):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[:, ::1] xv = x, ov = out
    cdef f64[::1] rv = r
    cdef Py_ssize_t i, j, n = xv.shape[0], d = xv.shape[1]
    with nogil:
        for i in range(n):
            for j in range(d):
                ov[i, j] = xv[i, j] * rv[j]
    return out


def scale(cnp.ndarray x, double s):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] xv = _flat(x), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] * s
    return out


def sin(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] xv = _flat(x), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = c_sin(xv[i])
    return out


def cos(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] xv = _flat(x), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = c_cos(xv[i])
    return out


def relu(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] xv = _flat(x), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] if xv[i] > 0.0 else 0.0
    return out


def square(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] xv = _flat(x), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] * xv[i]
    return out


def sin_bw(cnp.ndarray g, cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] gv = _flat(g), xv = _flat(x), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = gv[i] * c_cos(xv[i])
    return out


def cos_bw(cnp.ndarray g, cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] gv = _flat(g), xv = _flat(x), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = -gv[i] * c_sin(xv[i])
    return out


def relu_bw(cnp.ndarray g, cnp.ndarray x):
    # Subgradient 0 at x == 0, matching the numpy backend.
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] gv = _flat(g), xv = _flat(x), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = gv[i] if xv[i] > 0.0 else 0.0
    return out


def square_bw(cnp.ndarray g, cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef f64[::1] gv = _flat(g), xv = _flat(x), ov = _flat(out)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = 2.0 * gv[i] * xv[i]
    return out


def sum_all(cnp.ndarray x):
    cdef f64[::1] xv = _flat(x)
    cdef f64 total = 0.0
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            total += xv[i]
    return float(total)


def sum_axis0(cnp.ndarray x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray out = np.zeros(d, dtype=np.float64)
    cdef f64[:, ::1] xv = x
    cdef f64[::1] ov = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(d):
                ov[j] += xv[i, j]
    return out


def sum_axis1(cnp.ndarray x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray out = np.zeros(n, dtype=np.float64)
    cdef f64[:, ::1] xv = x
    cdef f64[::1] ov = out
    cdef Py_ssize_t i, j
    cdef f64 acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += xv[i, j]
            ov[i] = acc
    return out


def index_mean(cnp.ndarray flat, cnp.ndarray idx, cnp.ndarray inv_counts):
    cdef Py_ssize_t p, n = flat.shape[0], t = inv_counts.shape[0]
    cdef cnp.ndarray out = np.zeros(t, dtype=np.float64)
    cdef f64[::1] fv = flat, ov = out, cv = inv_counts
    cdef cnp.int64_t[::1] iv = idx
    cdef Py_ssize_t k
    with nogil:
        for p in range(n):
            ov[iv[p]] += fv[p]
        for k in range(t):
            ov[k] *= cv[k]
    return out


def index_mean_bw(cnp.ndarray g, cnp.ndarray idx, cnp.ndarray inv_counts):
    cdef Py_ssize_t p, n = idx.shape[0]
    cdef cnp.ndarray out = np.empty(n, dtype=np.float64)
    cdef f64[::1] gv = g, ov = out, cv = inv_counts
    cdef cnp.int64_t[::1] iv = idx
    with nogil:
        for p in range(n):
            ov[p] = gv[iv[p]] * cv[iv[p]]
    return out
