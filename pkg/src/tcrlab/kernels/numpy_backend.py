"""Pure-numpy reference implementations of the hot kernels.

Every function here has a fused counterpart in the compiled extension
(``tcrlab._ckernels``); the two backends must agree to floating-point
tolerance.  All 2-D inputs are row-major with the reduced axis last.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def masked_softmax_fwd(scores, mask):
    """Row-wise softmax over unmasked columns.

    scores: [R, C] float32/64; mask: [R, C] uint8 (1 = attendable).
    Masked columns come out exactly 0; fully masked rows come out as
    all-zero rows rather than NaN.
    """
    neg_inf = np.float64(-np.inf) if scores.dtype == np.float64 else np.float32(-np.inf)
    shifted = np.where(mask != 0, scores, neg_inf)
    row_max = shifted.max(axis=1, keepdims=True)
    # fully masked rows: max is -inf; clamp so exp() below stays finite
    safe_max = np.where(np.isfinite(row_max), row_max, 0)
    e = np.where(mask != 0, np.exp(shifted - safe_max), 0)
    denom = e.sum(axis=1, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    return np.ascontiguousarray(out)


def softmax_bwd(probs, grad_out):
    """Gradient of softmax: p * (g - sum(g * p))."""
    dot = np.sum(probs * grad_out, axis=1, keepdims=True)
    return probs * (grad_out - dot)


def layernorm_fwd(x, gain, bias, eps):
    """Per-row normalisation followed by affine; returns (y, mean, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    var = np.square(x - mu).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mu) * rstd * gain + bias
    return np.ascontiguousarray(y), mu[:, 0].copy(), rstd[:, 0].copy()


def layernorm_bwd(x, mu, rstd, gain, grad_out):
    """Gradient of layernorm_fwd; returns (dx, dgain, dbias)."""
    xhat = (x - mu[:, None]) * rstd[:, None]
    dgain = np.sum(grad_out * xhat, axis=0)
    dbias = np.sum(grad_out, axis=0)
    dxhat = grad_out * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgain.astype(x.dtype, copy=False), dbias.astype(x.dtype, copy=False)


def gelu_fwd(x):
    """Exact (erf-based) GELU."""
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_bwd(x, grad_out):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (grad_out * (cdf + x * pdf)).astype(x.dtype, copy=False)


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """One fused AdamW step, in place on param/m/v.

    Decoupled weight decay: the decay term never touches the moment
    buffers.  ``step`` is the 1-based update count.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    if weight_decay != 0.0:
        param -= lr * weight_decay * param
    param -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
