"""Shared oracles and helpers for the test suite."""

import itertools

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_err(analytic, numeric, floor=1e-6):
    """Relative disagreement with a floor to keep near-zero gradients honest."""
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(numeric, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_gradient(loss_fn, arr, eps=1e-5, indices=None):
    """Central finite differences of a scalar loss w.r.t. entries of arr (in place)."""
    if indices is None:
        indices = list(np.ndindex(arr.shape))
    grad = np.zeros(len(indices))
    for n, idx in enumerate(indices):
        orig = arr[idx]
        arr[idx] = orig + eps
        lp = loss_fn()
        arr[idx] = orig - eps
        lm = loss_fn()
        arr[idx] = orig
        grad[n] = (lp - lm) / (2 * eps)
    return grad


def naive_conv3d(x, weights, bias, stride=(1, 1, 1), pad=(0, 0, 0)):
    """Independent 7-nested-loop convolution oracle (plus explicit window sums)."""
    n, ci, d, h, w = x.shape
    co, _, kd, kh, kw = weights.shape
    sd, sh, sw = stride
    pd, ph, pw = pad
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    do = (d + 2 * pd - kd) // sd + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, co, do, ho, wo))
    for i in range(n):
        for o in range(co):
            for zd in range(do):
                for zh in range(ho):
                    for zw in range(wo):
                        total = 0.0
                        for c, a, b, e in itertools.product(
                                range(ci), range(kd), range(kh), range(kw)):
                            total += (weights[o, c, a, b, e]
                                      * xp[i, c, sd * zd + a, sh * zh + b, sw * zw + e])
                        if bias is not None:
                            total += bias[o]
                        out[i, o, zd, zh, zw] = total
    return out


def naive_avg_pool3d(x, window, stride):
    n, c, d, h, w = x.shape
    kd, kh, kw = window
    sd, sh, sw = stride
    do = (d - kd) // sd + 1
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    out = np.zeros((n, c, do, ho, wo))
    for i in range(n):
        for ch in range(c):
            for zd in range(do):
                for zh in range(ho):
                    for zw in range(wo):
                        win = x[i, ch, sd * zd:sd * zd + kd,
                                sh * zh:sh * zh + kh, sw * zw:sw * zw + kw]
                        out[i, ch, zd, zh, zw] = win.sum() / (kd * kh * kw)
    return out
