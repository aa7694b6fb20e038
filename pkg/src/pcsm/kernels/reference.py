"""Pure numpy implementations of the hot kernels.

These are the fallback backend and the parity reference for the compiled
extension. Every function here has an identically-named twin in _fused.pyx;
the package selects one set at import time (see __init__).

All row-wise kernels (softmax, layernorm) operate on the last axis and
accept arrays of any leading shape.
"""

import numpy as np

# tanh-form gelu; the constant is sqrt(2/pi)
_GELU_C = 0.7978845608028654
_GELU_A = 0.044715


def gelu_fwd(x):
    """Returns (y, t) where t = tanh(...) is reused by the backward pass."""
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(x, t, gy):
    x2 = x * x
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax_fwd(x):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_bwd(y, gy):
    dot = np.sum(gy * y, axis=-1, keepdims=True)
    return y * (gy - dot)


def layernorm_fwd(x, eps):
    """Normalize the last axis to zero mean / unit variance.

    Returns (xhat, inv_std); the affine part is applied by the caller so
    that gain/bias may carry extra broadcast axes (per-head parameters).
    """
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def layernorm_bwd(xhat, inv, gxhat):
    """Gradient through the normalization given d(loss)/d(xhat)."""
    m1 = np.mean(gxhat, axis=-1, keepdims=True)
    m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True)
    return inv * (gxhat - m1 - xhat * m2)


def adamw_update(w, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """One decoupled-weight-decay Adam step, in place on w/m/v.

    bc1, bc2 are the bias-correction factors 1-beta^t for the current step.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    if weight_decay != 0.0:
        w -= lr * weight_decay * w
    w -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
