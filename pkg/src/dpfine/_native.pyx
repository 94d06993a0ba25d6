# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled layer kernels.

Signature-compatible with dpfine._kernels_numpy; selected at import by
dpfine.backend when this extension is importable. Loops are arranged so
the innermost dimension walks contiguous memory, which lets the C
compiler vectorize the weight-broadcast accumulations without relaxing
IEEE semantics (results stay deterministic for a given build).
"""

import numpy as np

cdef extern from *:
    """
    /* restrict-qualified helpers so the C compiler can vectorize the
       accumulation loops without runtime alias checks */
    static void dpf_axpy(double* restrict y, const double* restrict x,
                         double a, long n) {
        long i;
        for (i = 0; i < n; i++) y[i] += a * x[i];
    }
    static void dpf_copy(double* restrict y, const double* restrict x, long n) {
        long i;
        for (i = 0; i < n; i++) y[i] = x[i];
    }
    /* four independent accumulators: vectorizable without -ffast-math,
       deterministic for a given build */
    static double dpf_dot(const double* restrict a, const double* restrict b, long n) {
        double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
        long i = 0;
        for (; i + 4 <= n; i += 4) {
            s0 += a[i] * b[i];
            s1 += a[i + 1] * b[i + 1];
            s2 += a[i + 2] * b[i + 2];
            s3 += a[i + 3] * b[i + 3];
        }
        for (; i < n; i++) s0 += a[i] * b[i];
        return (s0 + s1) + (s2 + s3);
    }
    """
    void dpf_axpy(double* y, const double* x, double a, long n) nogil
    void dpf_copy(double* y, const double* x, long n) nogil
    double dpf_dot(const double* a, const double* b, long n) nogil

BACKEND_NAME = "native"


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   double[::1] bias, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], kk = w.shape[2]
    cdef Py_ssize_t oh = (h + 2 * pad - kk) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * pad - kk) // stride + 1
    cdef Py_ssize_t hp = h + 2 * pad, wp = wd + 2 * pad
    cdef Py_ssize_t span = oh * wp

    # Flat padded input with a small tail so fused-row spans stay in bounds.
    xp_arr = np.zeros((b, c_in, hp * wp + kk))
    cdef double[:, :, ::1] xpf = xp_arr
    cdef Py_ssize_t bi, ci, i, j, oi, oj, oc
    for bi in range(b):
        for ci in range(c_in):
            for i in range(h):
                dpf_copy(&xpf[bi, ci, (i + pad) * wp + pad], &x[bi, ci, i, 0], wd)

    y_arr = np.empty((b, c_out, oh, ow))
    cdef double[:, :, :, ::1] y = y_arr
    ybuf_arr = np.empty(span)
    cdef double[::1] ybuf = ybuf_arr
    cdef double wv, bv
    if stride == 1:
        # One fused axpy per weight tap covers every output position; the
        # pad columns of ybuf are scratch and never copied out.
        for bi in range(b):
            for oc in range(c_out):
                for oi in range(span):
                    ybuf[oi] = 0.0
                for ci in range(c_in):
                    for i in range(kk):
                        for j in range(kk):
                            dpf_axpy(&ybuf[0], &xpf[bi, ci, i * wp + j],
                                     w[oc, ci, i, j], span)
                bv = bias[oc]
                for oi in range(oh):
                    for oj in range(ow):
                        y[bi, oc, oi, oj] = ybuf[oi * wp + oj] + bv
    else:
        for bi in range(b):
            for oc in range(c_out):
                bv = bias[oc]
                for oi in range(oh):
                    for oj in range(ow):
                        y[bi, oc, oi, oj] = bv
                for ci in range(c_in):
                    for i in range(kk):
                        for j in range(kk):
                            wv = w[oc, ci, i, j]
                            for oi in range(oh):
                                for oj in range(ow):
                                    y[bi, oc, oi, oj] += wv * xpf[bi, ci,
                                        (oi * stride + i) * wp + oj * stride + j]
    return y_arr, None


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] dy, int stride, int pad,
                    bint need_dx, bint need_wgrad, int aug_k=1, ctx=None):
    cdef Py_ssize_t b = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], kk = w.shape[2]
    cdef Py_ssize_t oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t hp = h + 2 * pad, wp = wd + 2 * pad
    cdef Py_ssize_t span = oh * wp
    cdef Py_ssize_t rows = b // aug_k
    cdef double inv_k = 1.0 / aug_k
    cdef Py_ssize_t bi, ci, i, j, oi, oj, oc, g, off
    cdef double s, wv

    if stride != 1:
        return _conv2d_backward_generic(x, w, dy, stride, pad, need_dx, need_wgrad, aug_k)

    xp_arr = np.zeros((b, c_in, hp * wp + kk))
    cdef double[:, :, ::1] xpf = xp_arr
    if need_wgrad:
        for bi in range(b):
            for ci in range(c_in):
                for i in range(h):
                    dpf_copy(&xpf[bi, ci, (i + pad) * wp + pad], &x[bi, ci, i, 0], wd)

    dybuf_arr = np.zeros(span + kk)
    cdef double[::1] dybuf = dybuf_arr
    dx_arr = dw_arr = db_arr = None
    cdef double[:, :, ::1] dxpf
    cdef double[:, :, :, ::1] dxv
    cdef double[:, :, :, :, ::1] dw
    cdef double[:, ::1] db
    if need_dx:
        dxp_arr = np.zeros((b, c_in, hp * wp + kk))
        dxpf = dxp_arr
    if need_wgrad:
        dw_arr = np.zeros((rows, c_out, c_in, kk, kk))
        db_arr = np.zeros((rows, c_out))
        dw = dw_arr
        db = db_arr

    for bi in range(b):
        g = bi // aug_k
        for oc in range(c_out):
            s = 0.0
            for oi in range(oh):
                dpf_copy(&dybuf[oi * wp], &dy[bi, oc, oi, 0], ow)
                if need_wgrad:
                    for oj in range(ow):
                        s += dy[bi, oc, oi, oj]
            if need_wgrad:
                db[g, oc] += s * inv_k
            for ci in range(c_in):
                for i in range(kk):
                    for j in range(kk):
                        off = i * wp + j
                        if need_dx:
                            dpf_axpy(&dxpf[bi, ci, off], &dybuf[0], w[oc, ci, i, j], span)
                        if need_wgrad:
                            dw[g, oc, ci, i, j] += inv_k * dpf_dot(
                                &dybuf[0], &xpf[bi, ci, off], span)

    if need_dx:
        dx_out = np.empty((b, c_in, h, wd))
        dxv = dx_out
        for bi in range(b):
            for ci in range(c_in):
                for i in range(h):
                    dpf_copy(&dxv[bi, ci, i, 0],
                             &dxpf[bi, ci, (i + pad) * wp + pad], wd)
        dx_arr = dx_out
    return dx_arr, dw_arr, db_arr


def _conv2d_backward_generic(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                             double[:, :, :, ::1] dy, int stride, int pad,
                             bint need_dx, bint need_wgrad, int aug_k):
    cdef Py_ssize_t b = x.shape[0], c_in = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t c_out = w.shape[0], kk = w.shape[2]
    cdef Py_ssize_t oh = dy.shape[2], ow = dy.shape[3]
    cdef Py_ssize_t hp = h + 2 * pad, wp = wd + 2 * pad
    cdef Py_ssize_t rows = b // aug_k
    cdef double inv_k = 1.0 / aug_k
    cdef Py_ssize_t bi, ci, i, j, oi, oj, oc, g
    cdef double s, wv

    xp_arr = np.zeros((b, c_in, hp, wp))
    cdef double[:, :, :, ::1] xp = xp_arr
    for bi in range(b):
        for ci in range(c_in):
            for i in range(h):
                for j in range(wd):
                    xp[bi, ci, i + pad, j + pad] = x[bi, ci, i, j]

    dx_arr = dw_arr = db_arr = None
    cdef double[:, :, :, ::1] dxp
    cdef double[:, :, :, :, ::1] dw
    cdef double[:, ::1] db
    if need_wgrad:
        dw_arr = np.zeros((rows, c_out, c_in, kk, kk))
        db_arr = np.zeros((rows, c_out))
        dw = dw_arr
        db = db_arr
        for bi in range(b):
            g = bi // aug_k
            for oc in range(c_out):
                for oi in range(oh):
                    for oj in range(ow):
                        s = dy[bi, oc, oi, oj] * inv_k
                        db[g, oc] += s
                        for ci in range(c_in):
                            for i in range(kk):
                                for j in range(kk):
                                    dw[g, oc, ci, i, j] += s * xp[bi, ci,
                                        oi * stride + i, oj * stride + j]
    if need_dx:
        dxp_arr = np.zeros((b, c_in, hp, wp))
        dxp = dxp_arr
        for bi in range(b):
            for oc in range(c_out):
                for ci in range(c_in):
                    for i in range(kk):
                        for j in range(kk):
                            wv = w[oc, ci, i, j]
                            for oi in range(oh):
                                for oj in range(ow):
                                    dxp[bi, ci, oi * stride + i, oj * stride + j] += \
                                        wv * dy[bi, oc, oi, oj]
        dx_arr = np.ascontiguousarray(dxp_arr[:, :, pad : hp - pad, pad : wp - pad]) \
            if pad > 0 else dxp_arr
    return dx_arr, dw_arr, db_arr


def dense_forward(double[:, ::1] x, double[:, ::1] w, double[::1] bias):
    cdef Py_ssize_t b = x.shape[0], f_in = x.shape[1], out = w.shape[0]
    wt_arr = np.ascontiguousarray(np.asarray(w).T)
    cdef double[:, ::1] wt = wt_arr
    y_arr = np.empty((b, out))
    cdef double[:, ::1] y = y_arr
    cdef Py_ssize_t bi, f, o
    cdef double s
    cdef double* yrow
    cdef double* wrow
    for bi in range(b):
        yrow = &y[bi, 0]
        for o in range(out):
            yrow[o] = bias[o]
        for f in range(f_in):
            s = x[bi, f]
            if s != 0.0:
                dpf_axpy(yrow, &wt[f, 0], s, out)
    return y_arr


def dense_backward(double[:, ::1] x, double[:, ::1] w, double[:, ::1] dy,
                   bint need_dx, bint need_wgrad, int aug_k=1):
    cdef Py_ssize_t b = x.shape[0], f_in = x.shape[1], out = w.shape[0]
    cdef Py_ssize_t rows = b // aug_k
    cdef double inv_k = 1.0 / aug_k
    cdef Py_ssize_t bi, f, o, g
    cdef double s

    dx_arr = dw_arr = db_arr = None
    cdef double[:, ::1] dx
    cdef double[:, :, ::1] dw
    cdef double[:, ::1] db
    cdef double* arow
    cdef double* brow
    if need_dx:
        dx_arr = np.zeros((b, f_in))
        dx = dx_arr
        for bi in range(b):
            arow = &dx[bi, 0]
            for o in range(out):
                s = dy[bi, o]
                if s != 0.0:
                    dpf_axpy(arow, &w[o, 0], s, f_in)
    if need_wgrad:
        dw_arr = np.zeros((rows, out, f_in))
        db_arr = np.zeros((rows, out))
        dw = dw_arr
        db = db_arr
        for bi in range(b):
            g = bi // aug_k
            for o in range(out):
                s = dy[bi, o] * inv_k
                db[g, o] += s
                if s != 0.0:
                    dpf_axpy(&dw[g, o, 0], &x[bi, 0], s, f_in)
    return dx_arr, dw_arr, db_arr


def groupnorm_forward(double[:, :, :, ::1] x, int groups, double[::1] gamma,
                      double[::1] beta, double eps):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cg = c // groups, n = cg * h * wd, hw = h * wd
    y_arr = np.empty((b, c, h, wd))
    mean_arr = np.empty((b, groups))
    rstd_arr = np.empty((b, groups))
    cdef double[:, :, :, ::1] y = y_arr
    cdef double[:, ::1] mean = mean_arr
    cdef double[:, ::1] rstd = rstd_arr
    cdef double[:, :, :, ::1] xv = x
    cdef Py_ssize_t bi, gi, ci, i, j
    cdef double acc, acc2, m, r, gm, bt, v
    for bi in range(b):
        for gi in range(groups):
            acc = 0.0
            for ci in range(gi * cg, (gi + 1) * cg):
                for i in range(h):
                    for j in range(wd):
                        acc += xv[bi, ci, i, j]
            m = acc / n
            acc2 = 0.0
            for ci in range(gi * cg, (gi + 1) * cg):
                for i in range(h):
                    for j in range(wd):
                        v = xv[bi, ci, i, j] - m
                        acc2 += v * v
            r = 1.0 / ((acc2 / n + eps) ** 0.5)
            mean[bi, gi] = m
            rstd[bi, gi] = r
            for ci in range(gi * cg, (gi + 1) * cg):
                gm = gamma[ci] * r
                bt = beta[ci]
                for i in range(h):
                    for j in range(wd):
                        y[bi, ci, i, j] = (xv[bi, ci, i, j] - m) * gm + bt
    return y_arr, mean_arr, rstd_arr, None


def groupnorm_backward(double[:, :, :, ::1] x, double[::1] gamma,
                       double[:, ::1] mean, double[:, ::1] rstd,
                       double[:, :, :, ::1] dy, int groups,
                       bint need_wgrad, int aug_k=1, ctx=None):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t cg = c // groups, n = cg * h * wd
    cdef Py_ssize_t rows = b // aug_k
    cdef double inv_k = 1.0 / aug_k

    dx_arr = np.empty((b, c, h, wd))
    cdef double[:, :, :, ::1] dx = dx_arr
    dgamma_arr = dbeta_arr = None
    cdef double[:, ::1] dgamma
    cdef double[:, ::1] dbeta
    if need_wgrad:
        dgamma_arr = np.zeros((rows, c))
        dbeta_arr = np.zeros((rows, c))
        dgamma = dgamma_arr
        dbeta = dbeta_arr

    cdef Py_ssize_t bi, gi, ci, i, j, g
    cdef double m, r, xn, dxn, m1, m2, sg, sb
    for bi in range(b):
        g = bi // aug_k
        for gi in range(groups):
            m = mean[bi, gi]
            r = rstd[bi, gi]
            m1 = 0.0
            m2 = 0.0
            for ci in range(gi * cg, (gi + 1) * cg):
                sg = 0.0
                sb = 0.0
                for i in range(h):
                    for j in range(wd):
                        xn = (x[bi, ci, i, j] - m) * r
                        dxn = dy[bi, ci, i, j] * gamma[ci]
                        m1 += dxn
                        m2 += dxn * xn
                        sg += dy[bi, ci, i, j] * xn
                        sb += dy[bi, ci, i, j]
                if need_wgrad:
                    dgamma[g, ci] += sg * inv_k
                    dbeta[g, ci] += sb * inv_k
            m1 /= n
            m2 /= n
            for ci in range(gi * cg, (gi + 1) * cg):
                for i in range(h):
                    for j in range(wd):
                        xn = (x[bi, ci, i, j] - m) * r
                        dxn = dy[bi, ci, i, j] * gamma[ci]
                        dx[bi, ci, i, j] = r * (dxn - m1 - xn * m2)
    return dx_arr, dgamma_arr, dbeta_arr


def relu_forward(x):
    x_arr = np.ascontiguousarray(x)
    out_arr = np.empty_like(x_arr)
    cdef double[::1] xf = x_arr.reshape(-1)
    cdef double[::1] yf = out_arr.reshape(-1)
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        yf[i] = xf[i] if xf[i] > 0.0 else 0.0
    return out_arr


def relu_backward(x, dy):
    x_arr = np.ascontiguousarray(x)
    dy_arr = np.ascontiguousarray(dy)
    out_arr = np.empty_like(dy_arr)
    cdef double[::1] xf = x_arr.reshape(-1)
    cdef double[::1] df = dy_arr.reshape(-1)
    cdef double[::1] of = out_arr.reshape(-1)
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        of[i] = df[i] if xf[i] > 0.0 else 0.0
    return out_arr


def meanpool_forward(double[:, :, :, ::1] x, int pool):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t oh = h // pool, ow = wd // pool
    cdef double inv = 1.0 / (pool * pool)
    out_arr = np.zeros((b, c, oh, ow))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bi, ci, oi, oj, i, j
    cdef double acc
    for bi in range(b):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for i in range(pool):
                        for j in range(pool):
                            acc += x[bi, ci, oi * pool + i, oj * pool + j]
                    out[bi, ci, oi, oj] = acc * inv
    return out_arr


def meanpool_backward(double[:, :, :, ::1] dy, int pool):
    cdef Py_ssize_t b = dy.shape[0], c = dy.shape[1], oh = dy.shape[2], ow = dy.shape[3]
    cdef double inv = 1.0 / (pool * pool)
    dx_arr = np.empty((b, c, oh * pool, ow * pool))
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t bi, ci, oi, oj, i, j
    cdef double v
    for bi in range(b):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    v = dy[bi, ci, oi, oj] * inv
                    for i in range(pool):
                        for j in range(pool):
                            dx[bi, ci, oi * pool + i, oj * pool + j] = v
    return dx_arr
