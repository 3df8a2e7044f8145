"""Numba-compiled implementations of the hot numeric kernels.

All kernels are nopython-compiled with caching and without fastmath, so a
given backend produces bit-identical results across runs. Loop accumulation
order differs from BLAS, so agreement with the numpy backend is to ~1e-12
relative rather than bitwise.
"""

import math

import numpy as np
from numba import njit

GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
GELU_C1 = 0.044715


@njit(cache=True)
def matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


@njit(cache=True)
def bmm(a, b):
    nb, m, k = a.shape
    n = b.shape[2]
    out = np.zeros((nb, m, n))
    for t in range(nb):
        for i in range(m):
            for p in range(k):
                aip = a[t, i, p]
                for j in range(n):
                    out[t, i, j] += aip * b[t, p, j]
    return out


@njit(cache=True)
def bmm_nt(a, b):
    nb, m, k = a.shape
    n = b.shape[1]
    out = np.zeros((nb, m, n))
    for t in range(nb):
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for p in range(k):
                    acc += a[t, i, p] * b[t, j, p]
                out[t, i, j] = acc
    return out


@njit(cache=True)
def bmm_tn(a, b):
    nb, k, m = a.shape
    n = b.shape[2]
    out = np.zeros((nb, m, n))
    for t in range(nb):
        for p in range(k):
            for i in range(m):
                api = a[t, p, i]
                for j in range(n):
                    out[t, i, j] += api * b[t, p, j]
    return out


@njit(cache=True)
def softmax_rows(x):
    m, n = x.shape
    out = np.empty((m, n))
    for i in range(m):
        row_max = x[i, 0]
        for j in range(1, n):
            if x[i, j] > row_max:
                row_max = x[i, j]
        total = 0.0
        for j in range(n):
            e = math.exp(x[i, j] - row_max)
            out[i, j] = e
            total += e
        for j in range(n):
            out[i, j] /= total
    return out


@njit(cache=True)
def softmax_rows_backward(y, dy):
    m, n = y.shape
    dx = np.empty((m, n))
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += y[i, j] * dy[i, j]
        for j in range(n):
            dx[i, j] = y[i, j] * (dy[i, j] - dot)
    return dx


@njit(cache=True)
def layernorm_forward(x, gamma, beta, eps):
    m, n = x.shape
    out = np.empty((m, n))
    xhat = np.empty((m, n))
    rstd = np.empty(m)
    for i in range(m):
        mean = 0.0
        for j in range(n):
            mean += x[i, j]
        mean /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mean
            var += d * d
        var /= n
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            h = (x[i, j] - mean) * r
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]
    return out, xhat, rstd


@njit(cache=True)
def layernorm_backward(xhat, rstd, gamma, dy):
    m, n = xhat.shape
    dx = np.empty((m, n))
    dgamma = np.zeros(n)
    dbeta = np.zeros(n)
    for i in range(m):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            g = dy[i, j] * gamma[j]
            m1 += g
            m2 += g * xhat[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            g = dy[i, j] * gamma[j]
            dx[i, j] = rstd[i] * (g - m1 - xhat[i, j] * m2)
    return dx, dgamma, dbeta


@njit(cache=True)
def gelu(x):
    m, n = x.shape
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            v = x[i, j]
            inner = GELU_C0 * (v + GELU_C1 * v * v * v)
            out[i, j] = 0.5 * v * (1.0 + math.tanh(inner))
    return out


@njit(cache=True)
def gelu_backward(x, dy):
    m, n = x.shape
    dx = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            v = x[i, j]
            inner = GELU_C0 * (v + GELU_C1 * v * v * v)
            t = math.tanh(inner)
            dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * v * v)
            dx[i, j] = dy[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return dx
