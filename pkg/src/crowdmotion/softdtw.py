"""Soft dynamic time warping with an explicit backward recursion."""

import numpy as np
import torch
from numba import njit


@njit(cache=True)
def _softmin3(a, b, c, gamma):
    m = min(a, min(b, c))
    if m == np.inf:
        return np.inf
    s = np.exp(-(a - m) / gamma) + np.exp(-(b - m) / gamma) + np.exp(-(c - m) / gamma)
    return m - gamma * np.log(s)


@njit(cache=True)
def _forward(D, gamma):
    n, m = D.shape
    R = np.full((n + 2, m + 2), np.inf)
    R[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            R[i, j] = D[i - 1, j - 1] + _softmin3(R[i - 1, j], R[i, j - 1], R[i - 1, j - 1], gamma)
    return R


@njit(cache=True)
def _backward(D, R, gamma):
    n, m = D.shape
    Dp = np.zeros((n + 2, m + 2))
    Dp[1:n + 1, 1:m + 1] = D
    E = np.zeros((n + 2, m + 2))
    E[n + 1, m + 1] = 1.0
    R = R.copy()
    R[1:n + 1, m + 1] = -np.inf
    R[n + 1, 1:m + 1] = -np.inf
    R[n + 1, m + 1] = R[n, m]
    for i in range(n, 0, -1):
        for j in range(m, 0, -1):
            a = np.exp((R[i + 1, j] - R[i, j] - Dp[i + 1, j]) / gamma)
            b = np.exp((R[i, j + 1] - R[i, j] - Dp[i, j + 1]) / gamma)
            c = np.exp((R[i + 1, j + 1] - R[i, j] - Dp[i + 1, j + 1]) / gamma)
            E[i, j] = E[i + 1, j] * a + E[i, j + 1] * b + E[i + 1, j + 1] * c
    return E[1:n + 1, 1:m + 1]


def soft_dtw(D, gamma=0.1):
    """Soft-DTW value and its gradient with respect to the cost matrix ``D``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    D = np.ascontiguousarray(D, dtype=np.float64)
    R = _forward(D, gamma)
    return float(R[D.shape[0], D.shape[1]]), _backward(D, R, gamma)


def dtw(D):
    """Classic DTW value (hard minimum over monotone paths)."""
    D = np.asarray(D, dtype=np.float64)
    n, m = D.shape
    R = np.full((n + 1, m + 1), np.inf)
    R[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            R[i, j] = D[i - 1, j - 1] + min(R[i - 1, j], R[i, j - 1], R[i - 1, j - 1])
    return float(R[n, m])


class _SoftDTW(torch.autograd.Function):
    @staticmethod
    def forward(ctx, D, gamma):
        val, grad = soft_dtw(D.detach().cpu().numpy(), gamma)
        ctx.save_for_backward(torch.as_tensor(grad, dtype=D.dtype))
        return D.new_tensor(val)

    @staticmethod
    def backward(ctx, g):
        (grad,) = ctx.saved_tensors
        return g * grad, None


def soft_dtw_torch(D, gamma=0.1):
    """Differentiable soft-DTW of a torch cost matrix."""
    return _SoftDTW.apply(D, gamma)
