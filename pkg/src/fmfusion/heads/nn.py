"""Layer primitives with explicit reverse-mode derivatives.

Each ``*_forward`` returns its output plus whatever the matching
``*_backward`` needs; backward functions map an upstream gradient to
input (and parameter) gradients.
"""

import numpy as np


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def affine_forward(x, w, b):
    return x @ w + b


def affine_backward(dy, x, w):
    """Returns (dx, dw, db) for y = x @ w + b; x may be 1-D or 2-D."""
    if x.ndim == 1:
        return w @ dy, np.outer(x, dy), dy.copy()
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, pre):
    return dy * (pre > 0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def dropout_mask(rng, shape, rate):
    """Inverted-dropout mask: kept units scaled by 1/(1-rate)."""
    if rate <= 0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def softmax(s):
    e = np.exp(s - s.max())
    return e / e.sum()


def log_softmax(s):
    m = s.max()
    return s - m - np.log(np.exp(s - m).sum())


def cross_entropy(logits, label):
    """Loss and d loss / d logits for a single 2-logit sample."""
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[label] -= 1.0
    return -logp[label], grad
