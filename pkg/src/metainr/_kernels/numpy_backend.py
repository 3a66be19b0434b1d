"""Pure-Python (numpy) implementations of the hot kernels.

Every function takes and returns C-contiguous float64 arrays and must stay
semantically interchangeable with the compiled backend in ``_fast.pyx``.
"""

import numpy as np


def matmul(a, b, trans_a=False, trans_b=False):
    if trans_a:
        a = a.T
    if trans_b:
        b = b.T
    return np.ascontiguousarray(a @ b)


def add(x, y):
    return x + y


def sub(x, y):
    return x - y


def mul(x, y):
    return x * y


def add_row(x, r):
    return x + r


def mul_row(x, r):
    return x * r


def scale(x, s):
    return x * s


def sin(x):
    return np.sin(x)


def cos(x):
    return np.cos(x)


def relu(x):
    return np.maximum(x, 0.0)


def square(x):
    return np.square(x)


def sin_bw(g, x):
    return g * np.cos(x)


def cos_bw(g, x):
    return -g * np.sin(x)


def relu_bw(g, x):
    # Subgradient 0 at x == 0.
    return np.where(x > 0.0, g, 0.0)


def square_bw(g, x):
    return 2.0 * g * x


def sum_all(x):
    return float(np.sum(x))


def sum_axis0(x):
    return np.ascontiguousarray(x.sum(axis=0))


def sum_axis1(x):
    return np.ascontiguousarray(x.sum(axis=1))


def index_mean(flat, idx, inv_counts):
    """out[k] = mean of flat entries whose index maps to k."""
    sums = np.bincount(idx, weights=flat, minlength=inv_counts.shape[0])
    return sums * inv_counts


def index_mean_bw(g, idx, inv_counts):
    return np.ascontiguousarray((g * inv_counts)[idx])
