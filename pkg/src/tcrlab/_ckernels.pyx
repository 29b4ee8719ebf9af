# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused C kernels for the training hot loops.

Mirrors tcrlab.kernels.numpy_backend function-for-function.  Row
operations take C-contiguous [R, C] buffers; elementwise operations are
dispatched through flat views by the Python wrappers at the bottom.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt

cnp.import_array()

ctypedef fused floating:
    float
    double

DEF INV_SQRT2 = 0.7071067811865476
DEF INV_SQRT_2PI = 0.3989422804014327


def _masked_softmax_fwd(floating[:, ::1] scores,
                        const unsigned char[:, ::1] mask,
                        floating[:, ::1] out):
    cdef Py_ssize_t R = scores.shape[0], C = scores.shape[1]
    cdef Py_ssize_t i, j
    cdef floating row_max, denom, e
    cdef bint any_valid
    with nogil:
        for i in range(R):
            any_valid = False
            row_max = 0
            for j in range(C):
                if mask[i, j]:
                    if not any_valid or scores[i, j] > row_max:
                        row_max = scores[i, j]
                    any_valid = True
            if not any_valid:
                for j in range(C):
                    out[i, j] = 0
                continue
            denom = 0
            for j in range(C):
                if mask[i, j]:
                    e = exp(scores[i, j] - row_max)
                    out[i, j] = e
                    denom += e
                else:
                    out[i, j] = 0
            for j in range(C):
                out[i, j] /= denom


def _softmax_bwd(floating[:, ::1] probs, floating[:, ::1] grad_out,
                 floating[:, ::1] out):
    cdef Py_ssize_t R = probs.shape[0], C = probs.shape[1]
    cdef Py_ssize_t i, j
    cdef floating dot
    with nogil:
        for i in range(R):
            dot = 0
            for j in range(C):
                dot += probs[i, j] * grad_out[i, j]
            for j in range(C):
                out[i, j] = probs[i, j] * (grad_out[i, j] - dot)


def _layernorm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias,
                   double eps, floating[:, ::1] y, floating[::1] mean,
                   floating[::1] rstd):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t i, j
    cdef floating mu, var, rs, d
    with nogil:
        for i in range(R):
            mu = 0
            for j in range(C):
                mu += x[i, j]
            mu /= C
            var = 0
            for j in range(C):
                d = x[i, j] - mu
                var += d * d
            var /= C
            rs = <floating>(1.0 / sqrt(var + eps))
            mean[i] = mu
            rstd[i] = rs
            for j in range(C):
                y[i, j] = (x[i, j] - mu) * rs * gain[j] + bias[j]


def _layernorm_bwd(floating[:, ::1] x, floating[::1] mu, floating[::1] rstd,
                   floating[::1] gain, floating[:, ::1] grad_out,
                   floating[:, ::1] dx, floating[::1] dgain,
                   floating[::1] dbias):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t i, j
    cdef floating m1, m2, xhat, dxh
    with nogil:
        for j in range(C):
            dgain[j] = 0
            dbias[j] = 0
        for i in range(R):
            m1 = 0
            m2 = 0
            for j in range(C):
                xhat = (x[i, j] - mu[i]) * rstd[i]
                dxh = grad_out[i, j] * gain[j]
                m1 += dxh
                m2 += dxh * xhat
                dgain[j] += grad_out[i, j] * xhat
                dbias[j] += grad_out[i, j]
            m1 /= C
            m2 /= C
            for j in range(C):
                xhat = (x[i, j] - mu[i]) * rstd[i]
                dxh = grad_out[i, j] * gain[j]
                dx[i, j] = (dxh - m1 - xhat * m2) * rstd[i]


def _gelu_fwd(floating[::1] x, floating[::1] out):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            out[i] = <floating>(0.5 * x[i] * (1.0 + erf(x[i] * INV_SQRT2)))


def _gelu_bwd(floating[::1] x, floating[::1] grad_out, floating[::1] out):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    cdef double cdf, pdf
    with nogil:
        for i in range(n):
            cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
            pdf = exp(-0.5 * x[i] * x[i]) * INV_SQRT_2PI
            out[i] = <floating>(grad_out[i] * (cdf + x[i] * pdf))


def _adamw_update(floating[::1] param, floating[::1] grad, floating[::1] m,
                  floating[::1] v, double lr, double beta1, double beta2,
                  double eps, double weight_decay, long step):
    cdef Py_ssize_t n = param.shape[0]
    cdef Py_ssize_t i
    cdef double bc1 = 1.0 - beta1 ** step
    cdef double bc2 = 1.0 - beta2 ** step
    cdef double scale = lr / bc1
    with nogil:
        for i in range(n):
            m[i] = <floating>(beta1 * m[i] + (1.0 - beta1) * grad[i])
            v[i] = <floating>(beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i])
            if weight_decay != 0.0:
                param[i] -= <floating>(lr * weight_decay * param[i])
            param[i] -= <floating>(scale * m[i] / (sqrt(v[i] / bc2) + eps))


# Python-facing wrappers: allocate outputs, normalise shapes.

def masked_softmax_fwd(scores, mask):
    out = np.empty_like(scores)
    _masked_softmax_fwd(scores, mask, out)
    return out


def softmax_bwd(probs, grad_out):
    out = np.empty_like(probs)
    _softmax_bwd(probs, np.ascontiguousarray(grad_out), out)
    return out


def layernorm_fwd(x, gain, bias, eps):
    y = np.empty_like(x)
    mean = np.empty(x.shape[0], dtype=x.dtype)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _layernorm_fwd(x, gain, bias, eps, y, mean, rstd)
    return y, mean, rstd


def layernorm_bwd(x, mu, rstd, gain, grad_out):
    dx = np.empty_like(x)
    dgain = np.empty_like(gain)
    dbias = np.empty_like(gain)
    _layernorm_bwd(x, mu, rstd, gain, np.ascontiguousarray(grad_out),
                   dx, dgain, dbias)
    return dx, dgain, dbias


def gelu_fwd(x):
    out = np.empty_like(x)
    _gelu_fwd(x.reshape(-1), out.reshape(-1))
    return out


def gelu_bwd(x, grad_out):
    out = np.empty_like(x)
    _gelu_bwd(x.reshape(-1), np.ascontiguousarray(grad_out).reshape(-1),
              out.reshape(-1))
    return out


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    _adamw_update(param.reshape(-1), np.ascontiguousarray(grad).reshape(-1),
                  m.reshape(-1), v.reshape(-1),
                  lr, beta1, beta2, eps, weight_decay, step)
