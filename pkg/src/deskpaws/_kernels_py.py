"""Pure-numpy row kernels.

Reference implementations of the row-wise hot loops. The compiled module
``deskpaws._ckernels`` exposes the same functions with the same signatures.
"""

import numpy as np


def softmax_rows(a, tau):
    s = a / tau
    s = s - s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def softmax_rows_backward(y, g, tau):
    return y * (g - (g * y).sum(axis=1, keepdims=True)) / tau


def l2_normalize_rows(a, eps):
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    return a / np.maximum(norms, eps)


def l2_normalize_rows_backward(a, g, eps):
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    guarded = np.maximum(norms, eps)
    y = a / guarded
    out = (g - y * (g * y).sum(axis=1, keepdims=True)) / guarded
    # degenerate rows (norm below eps) pass no gradient
    out[norms[:, 0] < eps] = 0.0
    return out


def sharpen_rows(p, temperature, floor):
    w = np.exp(np.log(np.maximum(p, floor)) / temperature)
    return w / w.sum(axis=1, keepdims=True)


def sharpen_rows_backward(p, y, g, temperature, floor):
    inner = y * (g - (g * y).sum(axis=1, keepdims=True)) / temperature
    return np.where(p > floor, inner / np.maximum(p, floor), 0.0)


def cross_entropy_rows(target, pred, floor):
    return float(-(target * np.log(np.maximum(pred, floor))).sum() / target.shape[0])


def cross_entropy_rows_backward(target, pred, floor):
    n = target.shape[0]
    return np.where(pred > floor, -target / np.maximum(pred, floor), 0.0) / n
