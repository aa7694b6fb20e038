# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused C kernels for the element-wise and row-wise hot spots.

Matrix products stay in numpy/BLAS in both backends; what pays off here is
fusing the multi-pass numpy pipelines (gelu, softmax, layernorm, the AdamW
update) into single passes over memory. Signatures mirror reference.py.
"""

import numpy as np

from libc.math cimport exp, expf, sqrt, sqrtf, tanh, tanhf

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_A = 0.044715


cdef void _gelu_fwd_1d(const real* x, real* y, real* t_out, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef real xi, t
    for i in range(n):
        xi = x[i]
        if real is float:
            t = tanhf(<float>GELU_C * (xi + <float>GELU_A * xi * xi * xi))
        else:
            t = tanh(GELU_C * (xi + GELU_A * xi * xi * xi))
        t_out[i] = t
        y[i] = <real>(0.5 * xi * (1.0 + t))


cdef void _gelu_bwd_1d(const real* x, const real* t, const real* gy, real* gx,
                       Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef real xi, x2, ti, dinner
    for i in range(n):
        xi = x[i]
        x2 = xi * xi
        ti = t[i]
        dinner = <real>GELU_C * (1.0 + 3.0 * <real>GELU_A * x2)
        gx[i] = gy[i] * (<real>0.5 * (1.0 + ti) + <real>0.5 * xi * (1.0 - ti * ti) * dinner)


cdef void _softmax_fwd_2d(const real* x, real* y, Py_ssize_t rows,
                          Py_ssize_t cols) noexcept nogil:
    cdef Py_ssize_t r, c
    cdef double m, s, e
    cdef const real* xr
    cdef real* yr
    for r in range(rows):
        xr = x + r * cols
        yr = y + r * cols
        m = xr[0]
        for c in range(1, cols):
            if xr[c] > m:
                m = xr[c]
        s = 0.0
        for c in range(cols):
            if real is float:
                e = expf(<float>(xr[c] - m))
            else:
                e = exp(<double>xr[c] - m)
            yr[c] = <real>e
            s += e
        s = 1.0 / s
        for c in range(cols):
            yr[c] = <real>(yr[c] * s)


cdef void _softmax_bwd_2d(const real* y, const real* gy, real* gx,
                          Py_ssize_t rows, Py_ssize_t cols) noexcept nogil:
    cdef Py_ssize_t r, c
    cdef double dot
    cdef const real* yr
    cdef const real* gr
    cdef real* xr
    for r in range(rows):
        yr = y + r * cols
        gr = gy + r * cols
        xr = gx + r * cols
        dot = 0.0
        for c in range(cols):
            dot += <double>gr[c] * yr[c]
        for c in range(cols):
            xr[c] = <real>(yr[c] * (<double>gr[c] - dot))


cdef void _layernorm_fwd_2d(const real* x, real* xhat, real* inv, double eps,
                            Py_ssize_t rows, Py_ssize_t cols) noexcept nogil:
    cdef Py_ssize_t r, c
    cdef double mu, var, d, iv
    cdef const real* xr
    cdef real* hr
    for r in range(rows):
        xr = x + r * cols
        hr = xhat + r * cols
        mu = 0.0
        for c in range(cols):
            mu += xr[c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = <double>xr[c] - mu
            var += d * d
        var /= cols
        if real is float:
            iv = 1.0 / <double>sqrtf(<float>(var + eps))
        else:
            iv = 1.0 / sqrt(var + eps)
        inv[r] = <real>iv
        for c in range(cols):
            hr[c] = <real>((<double>xr[c] - mu) * iv)


cdef void _layernorm_bwd_2d(const real* xhat, const real* inv, const real* gxhat,
                            real* gx, Py_ssize_t rows, Py_ssize_t cols) noexcept nogil:
    cdef Py_ssize_t r, c
    cdef double m1, m2
    cdef const real* hr
    cdef const real* gr
    cdef real* xr
    for r in range(rows):
        hr = xhat + r * cols
        gr = gxhat + r * cols
        xr = gx + r * cols
        m1 = 0.0
        m2 = 0.0
        for c in range(cols):
            m1 += gr[c]
            m2 += <double>gr[c] * hr[c]
        m1 /= cols
        m2 /= cols
        for c in range(cols):
            xr[c] = <real>(<double>inv[r] * (<double>gr[c] - m1 - <double>hr[c] * m2))


cdef void _adamw_1d(real* w, const real* g, real* m, real* v, double lr,
                    double beta1, double beta2, double eps, double wd,
                    double bc1, double bc2, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * (<double>g[i] * g[i])
        m[i] = <real>mi
        v[i] = <real>vi
        if wd != 0.0:
            w[i] = <real>(w[i] - lr * wd * w[i])
        w[i] = <real>(w[i] - lr * (mi / bc1) / (sqrt(vi / bc2) + eps))


def _run_gelu_fwd(real[::1] x, real[::1] y, real[::1] t):
    with nogil:
        _gelu_fwd_1d(&x[0], &y[0], &t[0], x.shape[0])


def _run_gelu_bwd(real[::1] x, real[::1] t, real[::1] gy, real[::1] gx):
    with nogil:
        _gelu_bwd_1d(&x[0], &t[0], &gy[0], &gx[0], x.shape[0])


def _run_softmax_fwd(real[:, ::1] x, real[:, ::1] y):
    with nogil:
        _softmax_fwd_2d(&x[0, 0], &y[0, 0], x.shape[0], x.shape[1])


def _run_softmax_bwd(real[:, ::1] y, real[:, ::1] gy, real[:, ::1] gx):
    with nogil:
        _softmax_bwd_2d(&y[0, 0], &gy[0, 0], &gx[0, 0], y.shape[0], y.shape[1])


def _run_layernorm_fwd(real[:, ::1] x, real[:, ::1] xhat, real[::1] inv, double eps):
    with nogil:
        _layernorm_fwd_2d(&x[0, 0], &xhat[0, 0], &inv[0], eps,
                          x.shape[0], x.shape[1])


def _run_layernorm_bwd(real[:, ::1] xhat, real[::1] inv, real[:, ::1] gxhat,
                       real[:, ::1] gx):
    with nogil:
        _layernorm_bwd_2d(&xhat[0, 0], &inv[0], &gxhat[0, 0], &gx[0, 0],
                          xhat.shape[0], xhat.shape[1])


def _run_adamw(real[::1] w, real[::1] g, real[::1] m, real[::1] v, double lr,
               double beta1, double beta2, double eps, double wd,
               double bc1, double bc2):
    with nogil:
        _adamw_1d(&w[0], &g[0], &m[0], &v[0], lr, beta1, beta2, eps, wd,
                  bc1, bc2, w.shape[0])


def gelu_fwd(x):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    t = np.empty_like(x)
    if x.size:
        _run_gelu_fwd(x.reshape(-1), y.reshape(-1), t.reshape(-1))
    return y, t


def gelu_bwd(x, t, gy):
    x = np.ascontiguousarray(x)
    gy = np.ascontiguousarray(gy)
    gx = np.empty_like(x)
    if x.size:
        _run_gelu_bwd(x.reshape(-1), t.reshape(-1), gy.reshape(-1), gx.reshape(-1))
    return gx


def softmax_fwd(x):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    cols = x.shape[x.ndim - 1]
    if x.size:
        _run_softmax_fwd(x.reshape(-1, cols), y.reshape(-1, cols))
    return y


def softmax_bwd(y, gy):
    y = np.ascontiguousarray(y)
    gy = np.ascontiguousarray(gy)
    gx = np.empty_like(y)
    cols = y.shape[y.ndim - 1]
    if y.size:
        _run_softmax_bwd(y.reshape(-1, cols), gy.reshape(-1, cols),
                         gx.reshape(-1, cols))
    return gx


def layernorm_fwd(x, eps):
    x = np.ascontiguousarray(x)
    xhat = np.empty_like(x)
    inv = np.empty(x.shape[:x.ndim - 1] + (1,), dtype=x.dtype)
    cols = x.shape[x.ndim - 1]
    if x.size:
        _run_layernorm_fwd(x.reshape(-1, cols), xhat.reshape(-1, cols),
                           inv.reshape(-1), float(eps))
    return xhat, inv


def layernorm_bwd(xhat, inv, gxhat):
    xhat = np.ascontiguousarray(xhat)
    inv = np.ascontiguousarray(inv)
    gxhat = np.ascontiguousarray(gxhat)
    gx = np.empty_like(xhat)
    cols = xhat.shape[xhat.ndim - 1]
    if xhat.size:
        _run_layernorm_bwd(xhat.reshape(-1, cols), inv.reshape(-1),
                           gxhat.reshape(-1, cols), gx.reshape(-1, cols))
    return gx


def adamw_update(w, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    g = np.ascontiguousarray(g)
    if w.size:
        _run_adamw(w.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                   float(lr), float(beta1), float(beta2), float(eps),
                   float(weight_decay), float(bc1), float(bc2))
