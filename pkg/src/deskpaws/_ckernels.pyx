# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row kernels; same signatures as ``deskpaws._kernels_py``."""

import numpy as np
from libc.math cimport sqrt


def softmax_rows(double[:, ::1] a, double tau):
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], i, j
    cdef double mx, total, v
    out = np.empty((n, k))
    cdef double[:, ::1] o = out
    for i in range(n):
        mx = a[i, 0] / tau
        for j in range(k):
            v = a[i, j] / tau
            o[i, j] = v
            if v > mx:
                mx = v
        for j in range(k):
            o[i, j] -= mx
    # numpy's vectorised exp beats a scalar libm loop
    np.exp(out, out=out)
    for i in range(n):
        total = 0.0
        for j in range(k):
            total += o[i, j]
        for j in range(k):
            o[i, j] /= total
    return out


def softmax_rows_backward(double[:, ::1] y, double[:, ::1] g, double tau):
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], i, j
    cdef double dot
    out = np.empty((n, k))
    cdef double[:, ::1] o = out
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += g[i, j] * y[i, j]
        for j in range(k):
            o[i, j] = y[i, j] * (g[i, j] - dot) / tau
    return out


def l2_normalize_rows(double[:, ::1] a, double eps):
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], i, j
    cdef double norm
    out = np.empty((n, k))
    cdef double[:, ::1] o = out
    for i in range(n):
        norm = 0.0
        for j in range(k):
            norm += a[i, j] * a[i, j]
        norm = sqrt(norm)
        if norm < eps:
            norm = eps
        for j in range(k):
            o[i, j] = a[i, j] / norm
    return out


def l2_normalize_rows_backward(double[:, ::1] a, double[:, ::1] g, double eps):
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], i, j
    cdef double norm, dot
    out = np.empty((n, k))
    cdef double[:, ::1] o = out
    for i in range(n):
        norm = 0.0
        for j in range(k):
            norm += a[i, j] * a[i, j]
        norm = sqrt(norm)
        if norm < eps:
            for j in range(k):
                o[i, j] = 0.0
            continue
        dot = 0.0
        for j in range(k):
            dot += g[i, j] * a[i, j]
        dot /= norm * norm
        for j in range(k):
            o[i, j] = (g[i, j] - a[i, j] * dot) / norm
    return out


def sharpen_rows(double[:, ::1] p, double temperature, double floor):
    cdef Py_ssize_t n = p.shape[0], k = p.shape[1], i, j
    cdef double total, v
    out = np.empty((n, k))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(k):
            v = p[i, j]
            o[i, j] = v if v > floor else floor
    np.log(out, out=out)
    for i in range(n):
        for j in range(k):
            o[i, j] /= temperature
    np.exp(out, out=out)
    for i in range(n):
        total = 0.0
        for j in range(k):
            total += o[i, j]
        for j in range(k):
            o[i, j] /= total
    return out


def sharpen_rows_backward(double[:, ::1] p, double[:, ::1] y, double[:, ::1] g,
                          double temperature, double floor):
    cdef Py_ssize_t n = p.shape[0], k = p.shape[1], i, j
    cdef double dot
    out = np.empty((n, k))
    cdef double[:, ::1] o = out
    for i in range(n):
        dot = 0.0
        for j in range(k):
            dot += g[i, j] * y[i, j]
        for j in range(k):
            if p[i, j] > floor:
                o[i, j] = y[i, j] * (g[i, j] - dot) / temperature / p[i, j]
            else:
                o[i, j] = 0.0
    return out


def cross_entropy_rows(double[:, ::1] target, double[:, ::1] pred, double floor):
    cdef Py_ssize_t n = target.shape[0], k = target.shape[1], i, j
    cdef double total = 0.0, v
    logs = np.empty((n, k))
    cdef double[:, ::1] lg = logs
    for i in range(n):
        for j in range(k):
            v = pred[i, j]
            lg[i, j] = v if v > floor else floor
    np.log(logs, out=logs)
    for i in range(n):
        for j in range(k):
            total -= target[i, j] * lg[i, j]
    return total / n


def cross_entropy_rows_backward(double[:, ::1] target, double[:, ::1] pred, double floor):
    cdef Py_ssize_t n = target.shape[0], k = target.shape[1], i, j
    out = np.empty((n, k))
    cdef double[:, ::1] o = out
    for i in range(n):
        for j in range(k):
            if pred[i, j] > floor:
                o[i, j] = -target[i, j] / pred[i, j] / n
            else:
                o[i, j] = 0.0
    return out
