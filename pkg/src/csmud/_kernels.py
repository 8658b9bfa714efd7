"""Compiled inner loops. Each returns the number of complex products it performed."""

import numpy as np
from numba import njit


@njit(cache=True)
def cr_sweep(Y, GT, X, omega, W, products, tags, t, lam, disabled):
    """Positions 0..ka-1 of one CR-EBCD sweep, ``W`` holding the first candidate's sum.

    Returns the product count, or ``-(i + 1)`` on a cache miss at position ``i``.
    """
    N, J = Y.shape
    count = 0
    for i in range(omega.shape[0]):
        k = omega[i]
        if i > 0:
            prev = omega[i - 1]
            use_old = (not disabled) and t > 1
            if use_old and tags[k] != t - 1:
                return -(i + 1)
            for n in range(N):
                g = GT[prev, n]
                for j in range(J):
                    p = g * X[prev, j]
                    if use_old:
                        W[n, j] += p - products[k, n, j]
                    else:
                        W[n, j] += p
                    products[prev, n, j] = p
            tags[prev] = t
            count += N * J
        gg = 0.0
        for n in range(N):
            gg += GT[k, n].real ** 2 + GT[k, n].imag ** 2
        denom = gg + lam
        for j in range(J):
            acc = 0j
            for n in range(N):
                acc += np.conj(GT[k, n]) * (Y[n, j] - W[n, j])
            X[k, j] = acc / denom
        count += N * J + N
    return count


@njit(cache=True)
def bcd_residual_sweeps(Y, GT, X, E, T, lam):
    """``T`` BCD sweeps keeping ``E = Y - G X`` up to date instead of rebuilding residuals."""
    K = GT.shape[0]
    N, J = Y.shape
    count = 0
    for _ in range(T):
        for k in range(K):
            gg = 0.0
            for n in range(N):
                gg += GT[k, n].real ** 2 + GT[k, n].imag ** 2
            denom = gg + lam
            for j in range(J):
                acc = 0j
                for n in range(N):
                    acc += np.conj(GT[k, n]) * (E[n, j] + GT[k, n] * X[k, j])
                new = acc / denom
                diff = new - X[k, j]
                for n in range(N):
                    E[n, j] -= GT[k, n] * diff
                X[k, j] = new
            count += 3 * N * J + N
    return count
