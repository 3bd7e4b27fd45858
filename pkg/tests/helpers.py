"""Shared test oracles: finite differences and Monte Carlo estimators."""

from __future__ import annotations

import numpy as np


def finite_difference_grad(f, arrays, h=1e-5):
    """Central-difference gradient of scalar ``f(arrays)`` w.r.t. each array.

    ``f`` must accept the list of arrays and return a float.  Returns a
    list of gradient arrays matching the input shapes.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(arrays)
            flat[i] = orig - h
            lo = f(arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-8):
    """Max elementwise relative error between two gradient lists."""
    err = 0.0
    for x, y in zip(a, b):
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        err = max(err, float(np.max(np.abs(x - y) / denom)))
    return err


def monte_carlo_lipschitz(forward, lo, hi, n_pairs, rng):
    """Largest observed ratio ``|f(x)-f(y)|_1 / |x-y|_1`` over random pairs."""
    dim = len(lo)
    xs = rng.uniform(lo, hi, size=(n_pairs, dim))
    ys = rng.uniform(lo, hi, size=(n_pairs, dim))
    fx = forward(xs)
    fy = forward(ys)
    num = np.abs(fx - fy).sum(axis=1)
    den = np.abs(xs - ys).sum(axis=1)
    keep = den > 1e-12
    return float(np.max(num[keep] / den[keep]))
