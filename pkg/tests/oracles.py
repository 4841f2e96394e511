"""Straight-line reference implementations used as test oracles.

Written with explicit loops and scipy's erf so they share no code with the
package.
"""

import math

import numpy as np


def gelu(z):
    return 0.5 * z * (1.0 + np.vectorize(math.erf)(z / math.sqrt(2.0)))


def relu(z):
    return np.where(z > 0, z, 0.0)


def joint_ln(x, eps):
    rows, cols = x.shape
    total = 0.0
    for i in range(rows):
        for j in range(cols):
            total += x[i, j]
    mean = total / (rows * cols)
    ss = 0.0
    for i in range(rows):
        for j in range(cols):
            ss += (x[i, j] - mean) ** 2
    r = math.sqrt(ss + eps)
    return (x - mean) / r


def matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def parallel_update(x, W1, W2, W3, W4, act, eps, step=1.0, decay=0.0):
    """``x + step * (W2 act(W1 n) + act(n W3) W4 - decay * x)`` with ``n`` the joint layer norm."""
    n = joint_ln(x, eps)
    token = matmul(W2, act(matmul(W1, n)))
    channel = matmul(act(matmul(n, W3)), W4)
    return x + step * (token + channel - decay * x)


def serial_update(x, W1, W2, W3, W4, act, eps):
    n1 = joint_ln(x, eps)
    x1 = x + matmul(W2, act(matmul(W1, n1)))
    n2 = joint_ln(x1, eps)
    return x1 + matmul(act(matmul(n2, W3)), W4)
