"""Numpy implementations of the per-layer compute kernels.

This is the fallback backend: every function here has a compiled twin in
the ``dpfine._native`` extension with identical signature and semantics.
All kernels are pure, operate on float64 C-contiguous arrays and carry a
leading batch dimension. Parameter gradients are returned per example
(one row per batch element), never reduced, because DP-SGD clips each
example's gradient before any aggregation.
"""

import numpy as np

BACKEND_NAME = "python"


def _im2col(x, kernel, stride, pad):
    """Extract sliding patches: [B,C,H,W] -> [B, C*k*k, OH*OW]."""
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sb, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, kernel, kernel, oh, ow),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(windows.reshape(b, c * kernel * kernel, oh * ow)), oh, ow


def conv2d_forward(x, w, bias, stride, pad):
    """Returns (y, ctx); ctx is backend-opaque forward state for backward."""
    out_c, in_c, kernel, _ = w.shape
    cols, oh, ow = _im2col(x, kernel, stride, pad)
    y = np.matmul(w.reshape(out_c, -1), cols)
    y += bias[:, None]
    return y.reshape(x.shape[0], out_c, oh, ow), cols


def conv2d_backward(x, w, dy, stride, pad, need_dx, need_wgrad, aug_k=1, ctx=None):
    """Returns (dx, dw, db); dw has shape [B/aug_k, out_c, in_c, k, k].

    With aug_k > 1 consecutive groups of aug_k batch rows are augmented
    copies of one example, and the parameter gradients are their mean.
    """
    b, in_c, h, w_in = x.shape
    out_c, _, kernel, _ = w.shape
    oh, ow = dy.shape[2], dy.shape[3]
    pos = oh * ow
    dy_mat = dy.reshape(b, out_c, pos)

    dw = db = dx = None
    if need_wgrad:
        cols = ctx if ctx is not None else _im2col(x, kernel, stride, pad)[0]
        if aug_k == 1:
            dw = np.matmul(dy_mat, cols.transpose(0, 2, 1))
            db = dy_mat.sum(axis=2)
        else:
            rows = b // aug_k
            dy_g = dy_mat.reshape(rows, aug_k, out_c, pos)
            cols_g = cols.reshape(rows, aug_k, -1, pos)
            dw = np.matmul(dy_g[:, 0], cols_g[:, 0].transpose(0, 2, 1))
            for j in range(1, aug_k):
                dw += np.matmul(dy_g[:, j], cols_g[:, j].transpose(0, 2, 1))
            dw /= aug_k
            db = dy_g.sum(axis=3).mean(axis=1)
        dw = dw.reshape(dw.shape[0], out_c, in_c, kernel, kernel)
    if need_dx:
        dcols = np.matmul(w.reshape(out_c, -1).T, dy_mat)
        dcols = dcols.reshape(b, in_c, kernel, kernel, oh, ow)
        hp, wp = h + 2 * pad, w_in + 2 * pad
        dx_pad = np.zeros((b, in_c, hp, wp))
        for i in range(kernel):
            for j in range(kernel):
                dx_pad[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += dcols[
                    :, :, i, j, :, :
                ]
        dx = dx_pad[:, :, pad : hp - pad, pad : wp - pad] if pad > 0 else dx_pad
        dx = np.ascontiguousarray(dx)
    return dx, dw, db


def dense_forward(x, w, bias):
    return x @ w.T + bias


def dense_backward(x, w, dy, need_dx, need_wgrad, aug_k=1):
    """Returns (dx, dw, db); dw has shape [B/aug_k, out, in], db [B/aug_k, out]."""
    dx = dy @ w if need_dx else None
    dw = db = None
    if need_wgrad:
        if aug_k == 1:
            dw = np.einsum("bo,bf->bof", dy, x)
            db = dy.copy()
        else:
            rows = x.shape[0] // aug_k
            dy_g = dy.reshape(rows, aug_k, -1)
            x_g = x.reshape(rows, aug_k, -1)
            dy_t = np.ascontiguousarray(dy_g.transpose(0, 2, 1))
            dw = np.matmul(dy_t, x_g) / aug_k
            db = dy_g.mean(axis=1)
    return dx, dw, db


def groupnorm_forward(x, groups, gamma, beta, eps):
    """Returns (y, mean, rstd, ctx); mean/rstd of shape [B, groups]."""
    b, c, h, w = x.shape
    n = (c // groups) * h * w
    xg = x.reshape(b, groups, n)
    mean = xg.mean(axis=2)
    centered = xg - mean[:, :, None]
    var = np.einsum("bgn,bgn->bg", centered, centered) / n
    rstd = 1.0 / np.sqrt(var + eps)
    xn = centered
    xn *= rstd[:, :, None]
    y = xn.reshape(b, c, h * w) * gamma[None, :, None] + beta[None, :, None]
    return y.reshape(b, c, h, w), mean, rstd, xn


def groupnorm_backward(x, gamma, mean, rstd, dy, groups, need_wgrad, aug_k=1, ctx=None):
    """Returns (dx, dgamma, dbeta); dgamma/dbeta have shape [B/aug_k, C]."""
    b, c, h, w = x.shape
    n = (c // groups) * h * w
    if ctx is not None:
        xn = ctx
    else:
        xg = x.reshape(b, groups, n)
        xn = (xg - mean[:, :, None]) * rstd[:, :, None]

    dgamma = dbeta = None
    if need_wgrad:
        xn_c = xn.reshape(b, c, h * w)
        dy_c = dy.reshape(b, c, h * w)
        dgamma = np.einsum("bcn,bcn->bc", dy_c, xn_c)
        dbeta = dy_c.sum(axis=2)
        if aug_k > 1:
            dgamma = dgamma.reshape(-1, aug_k, c).mean(axis=1)
            dbeta = dbeta.reshape(-1, aug_k, c).mean(axis=1)

    dxn = (dy.reshape(b, c, h * w) * gamma[None, :, None]).reshape(b, groups, n)
    m1 = dxn.mean(axis=2)
    m2 = np.einsum("bgn,bgn->bg", dxn, xn) / n
    dx = dxn
    dx -= m1[:, :, None]
    dx -= xn * m2[:, :, None]
    dx *= rstd[:, :, None]
    return dx.reshape(b, c, h, w), dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    return (x > 0) * dy


def meanpool_forward(x, pool):
    b, c, h, w = x.shape
    oh, ow = h // pool, w // pool
    out = np.zeros((b, c, oh, ow))
    for i in range(pool):
        for j in range(pool):
            out += x[:, :, i::pool, j::pool]
    out *= 1.0 / (pool * pool)
    return out


def meanpool_backward(dy, pool):
    b, c, oh, ow = dy.shape
    scaled = dy * (1.0 / (pool * pool))
    dx = np.empty((b, c, oh * pool, ow * pool))
    for i in range(pool):
        for j in range(pool):
            dx[:, :, i::pool, j::pool] = scaled
    return dx
