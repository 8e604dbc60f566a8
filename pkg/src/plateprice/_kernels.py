"""Fused per-step batch-norm + ReLU kernels for the recurrent scan.

These compute the same quantities as ``rnn_model.batchnorm_forward`` /
``batchnorm_backward`` followed by ReLU, in two or three row-major passes.
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=False)
def bn_relu_train(pre, gamma, beta, rm, rv, momentum, eps, h_out, xhat_out):
    B, H = pre.shape
    mu = np.zeros(H)
    for i in range(B):
        for j in range(H):
            mu[j] += pre[i, j]
    for j in range(H):
        mu[j] /= B
    var = np.zeros(H)
    for i in range(B):
        for j in range(H):
            d = pre[i, j] - mu[j]
            var[j] += d * d
    inv = np.empty(H)
    for j in range(H):
        var[j] /= B
        inv[j] = 1.0 / np.sqrt(var[j] + eps)
        rm[j] = momentum * rm[j] + (1.0 - momentum) * mu[j]
        rv[j] = momentum * rv[j] + (1.0 - momentum) * var[j]
    for i in range(B):
        for j in range(H):
            xh = (pre[i, j] - mu[j]) * inv[j]
            xhat_out[i, j] = xh
            z = gamma[j] * xh + beta[j]
            h_out[i, j] = z if z > 0.0 else 0.0
    return inv


@numba.njit(cache=True, fastmath=False)
def bn_relu_infer(pre, gamma, beta, rm, rv, eps, h_out):
    B, H = pre.shape
    inv = np.empty(H)
    for j in range(H):
        inv[j] = 1.0 / np.sqrt(rv[j] + eps)
    for i in range(B):
        for j in range(H):
            z = gamma[j] * ((pre[i, j] - rm[j]) * inv[j]) + beta[j]
            h_out[i, j] = z if z > 0.0 else 0.0
    return inv


@numba.njit(cache=True, fastmath=False)
def bn_relu_backward(dh, dprev, has_prev, h, xhat, inv, gamma, dpre_out, dgamma, dbeta):
    """``dpre_out`` receives the gradient w.r.t. the pre-normalization input."""
    B, H = dh.shape
    s_dz = np.zeros(H)
    s_dzx = np.zeros(H)
    for i in range(B):
        for j in range(H):
            g = dh[i, j]
            if has_prev:
                g += dprev[i, j]
            dz = g if h[i, j] > 0.0 else 0.0
            dpre_out[i, j] = dz
            s_dz[j] += dz
            s_dzx[j] += dz * xhat[i, j]
    for j in range(H):
        dgamma[j] += s_dzx[j]
        dbeta[j] += s_dz[j]
        s_dz[j] /= B
        s_dzx[j] /= B
    for i in range(B):
        for j in range(H):
            dpre_out[i, j] = gamma[j] * inv[j] * (dpre_out[i, j] - s_dz[j] - xhat[i, j] * s_dzx[j])
