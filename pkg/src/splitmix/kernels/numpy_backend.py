"""Pure-numpy implementations of the hot numeric kernels.

Reference semantics for the numba backend: same shapes, same float64
arithmetic, vectorized instead of looped. Accumulation order differs from
the looped kernels, so cross-backend agreement is to ~1e-12 relative, not
bitwise.
"""

import numpy as np

GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
GELU_C1 = 0.044715


def matmul(a, b):
    return a @ b


def bmm(a, b):
    """Batched matmul: [B,m,k] @ [B,k,n] -> [B,m,n]."""
    return np.matmul(a, b)


def bmm_nt(a, b):
    """Batched matmul with transposed rhs: [B,m,k] @ [B,n,k]^T -> [B,m,n]."""
    return np.matmul(a, np.swapaxes(b, 1, 2))


def bmm_tn(a, b):
    """Batched matmul with transposed lhs: [B,k,m]^T @ [B,k,n] -> [B,m,n]."""
    return np.matmul(np.swapaxes(a, 1, 2), b)


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, dy):
    dot = (y * dy).sum(axis=1, keepdims=True)
    return y * (dy - dot)


def layernorm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    out = xhat * gamma + beta
    return out, xhat, rstd[:, 0]


def layernorm_backward(xhat, rstd, gamma, dy):
    dyg = dy * gamma
    m1 = dyg.mean(axis=1, keepdims=True)
    m2 = (dyg * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dyg - m1 - xhat * m2)
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    return dx, dgamma, dbeta


def gelu(x):
    inner = GELU_C0 * (x + GELU_C1 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(x, dy):
    inner = GELU_C0 * (x + GELU_C1 * x**3)
    t = np.tanh(inner)
    dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)
