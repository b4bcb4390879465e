# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot kernels.

Fused float32/float64 loops with 64-bit accumulators; one pass per array
instead of the temporary-heavy NumPy expressions in reference.py.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh, pow

cnp.import_array()

BACKEND = "cython"

ctypedef fused floating:
    float
    double

cdef double GELU_SCALE = 0.7978845608028654  # sqrt(2/pi)
cdef double GELU_CUBIC = 0.044715


# ---------------------------------------------------------------------------
# GELU
# ---------------------------------------------------------------------------

cdef void _gelu_fwd(floating[::1] x, floating[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, t
    for i in range(n):
        v = <double> x[i]
        t = tanh(GELU_SCALE * (v + GELU_CUBIC * v * v * v))
        out[i] = <floating> (0.5 * v * (1.0 + t))


cdef void _gelu_bwd(floating[::1] x, floating[::1] dy, floating[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, t, local
    for i in range(n):
        v = <double> x[i]
        t = tanh(GELU_SCALE * (v + GELU_CUBIC * v * v * v))
        local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_SCALE * (
            1.0 + 3.0 * GELU_CUBIC * v * v
        )
        out[i] = <floating> (<double> dy[i] * local)


def gelu_fwd(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu_fwd[float](x.reshape(-1), out.reshape(-1))
    else:
        _gelu_fwd[double](x.reshape(-1), out.reshape(-1))
    return out


def gelu_bwd(x, dy):
    x = np.ascontiguousarray(x)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu_bwd[float](x.reshape(-1), dy.reshape(-1), out.reshape(-1))
    else:
        _gelu_bwd[double](x.reshape(-1), dy.reshape(-1), out.reshape(-1))
    return out


# ---------------------------------------------------------------------------
# Softmax over rows of a 2-D array
# ---------------------------------------------------------------------------

cdef void _softmax_fwd(floating[:, ::1] x, floating[:, ::1] out,
                       double[::1] scratch) noexcept nogil:
    cdef Py_ssize_t r, c, rows = x.shape[0], n = x.shape[1]
    cdef double mx, s, e
    for r in range(rows):
        mx = <double> x[r, 0]
        for c in range(1, n):
            if <double> x[r, c] > mx:
                mx = <double> x[r, c]
        s = 0.0
        for c in range(n):
            e = exp(<double> x[r, c] - mx)
            scratch[c] = e
            s += e
        for c in range(n):
            out[r, c] = <floating> (scratch[c] / s)


cdef void _softmax_bwd(floating[:, ::1] y, floating[:, ::1] dy,
                       floating[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t r, c, rows = y.shape[0], n = y.shape[1]
    cdef double inner
    for r in range(rows):
        inner = 0.0
        for c in range(n):
            inner += <double> y[r, c] * <double> dy[r, c]
        for c in range(n):
            out[r, c] = <floating> (<double> y[r, c] * (<double> dy[r, c] - inner))


def softmax_fwd(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    scratch = np.empty(x.shape[1], dtype=np.float64)
    if x.dtype == np.float32:
        _softmax_fwd[float](x, out, scratch)
    else:
        _softmax_fwd[double](x, out, scratch)
    return out


def softmax_bwd(y, dy):
    y = np.ascontiguousarray(y)
    dy = np.ascontiguousarray(dy, dtype=y.dtype)
    out = np.empty_like(y)
    if y.dtype == np.float32:
        _softmax_bwd[float](y, dy, out)
    else:
        _softmax_bwd[double](y, dy, out)
    return out


# ---------------------------------------------------------------------------
# Layer normalisation over rows of a 2-D array
# ---------------------------------------------------------------------------

cdef void _layernorm_fwd(floating[:, ::1] x, floating[::1] gain,
                         floating[::1] bias, double eps,
                         floating[:, ::1] y, double[::1] mean,
                         double[::1] rstd) noexcept nogil:
    cdef Py_ssize_t r, c, rows = x.shape[0], n = x.shape[1]
    cdef double mu, var, d, rs
    for r in range(rows):
        mu = 0.0
        for c in range(n):
            mu += <double> x[r, c]
        mu /= n
        var = 0.0
        for c in range(n):
            d = <double> x[r, c] - mu
            var += d * d
        var /= n
        rs = 1.0 / sqrt(var + eps)
        mean[r] = mu
        rstd[r] = rs
        for c in range(n):
            y[r, c] = <floating> (
                (<double> x[r, c] - mu) * rs * <double> gain[c] + <double> bias[c]
            )


cdef void _layernorm_bwd(floating[:, ::1] x, floating[::1] gain,
                         double[::1] mean, double[::1] rstd,
                         floating[:, ::1] dy, floating[:, ::1] dx,
                         double[::1] dgain, double[::1] dbias,
                         double[::1] xhat_row, double[::1] dxhat_row) noexcept nogil:
    cdef Py_ssize_t r, c, rows = x.shape[0], n = x.shape[1]
    cdef double s1, s2, dyv
    for c in range(n):
        dgain[c] = 0.0
        dbias[c] = 0.0
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for c in range(n):
            xhat_row[c] = (<double> x[r, c] - mean[r]) * rstd[r]
            dyv = <double> dy[r, c]
            dgain[c] += dyv * xhat_row[c]
            dbias[c] += dyv
            dxhat_row[c] = dyv * <double> gain[c]
            s1 += dxhat_row[c]
            s2 += dxhat_row[c] * xhat_row[c]
        for c in range(n):
            dx[r, c] = <floating> (
                rstd[r] / n * (n * dxhat_row[c] - s1 - xhat_row[c] * s2)
            )


def layernorm_fwd(x, gain, bias, eps):
    x = np.ascontiguousarray(x)
    gain = np.ascontiguousarray(gain, dtype=x.dtype)
    bias = np.ascontiguousarray(bias, dtype=x.dtype)
    y = np.empty_like(x)
    mean = np.empty(x.shape[0], dtype=np.float64)
    rstd = np.empty(x.shape[0], dtype=np.float64)
    if x.dtype == np.float32:
        _layernorm_fwd[float](x, gain, bias, eps, y, mean, rstd)
    else:
        _layernorm_fwd[double](x, gain, bias, eps, y, mean, rstd)
    return y, mean, rstd


def layernorm_bwd(x, gain, mean, rstd, dy):
    x = np.ascontiguousarray(x)
    gain = np.ascontiguousarray(gain, dtype=x.dtype)
    dy = np.ascontiguousarray(dy, dtype=x.dtype)
    dx = np.empty_like(x)
    n = x.shape[1]
    dgain = np.empty(n, dtype=np.float64)
    dbias = np.empty(n, dtype=np.float64)
    xhat_row = np.empty(n, dtype=np.float64)
    dxhat_row = np.empty(n, dtype=np.float64)
    if x.dtype == np.float32:
        _layernorm_bwd[float](x, gain, mean, rstd, dy, dx, dgain, dbias,
                              xhat_row, dxhat_row)
    else:
        _layernorm_bwd[double](x, gain, mean, rstd, dy, dx, dgain, dbias,
                               xhat_row, dxhat_row)
    return dx, dgain.astype(gain.dtype, copy=False), dbias.astype(gain.dtype, copy=False)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

cdef void _adam_step(floating[::1] p, floating[::1] g, floating[::1] m,
                     floating[::1] v, double lr, double beta1, double beta2,
                     double eps, double bc1, double bc2) noexcept nogil:
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gd, md, vd
    for i in range(n):
        gd = <double> g[i]
        md = beta1 * <double> m[i] + (1.0 - beta1) * gd
        vd = beta2 * <double> v[i] + (1.0 - beta2) * gd * gd
        m[i] = <floating> md
        v[i] = <floating> vd
        p[i] = <floating> (
            <double> p[i] - lr * (md / bc1) / (sqrt(vd / bc2) + eps)
        )


def adam_step(p, g, m, v, lr, beta1, beta2, eps, step):
    g = np.ascontiguousarray(g, dtype=p.dtype)
    bc1 = 1.0 - pow(beta1, step)
    bc2 = 1.0 - pow(beta2, step)
    if p.dtype == np.float32:
        _adam_step[float](p.reshape(-1), g.reshape(-1), m.reshape(-1),
                          v.reshape(-1), lr, beta1, beta2, eps, bc1, bc2)
    else:
        _adam_step[double](p.reshape(-1), g.reshape(-1), m.reshape(-1),
                           v.reshape(-1), lr, beta1, beta2, eps, bc1, bc2)
