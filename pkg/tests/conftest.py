"""Shared independent oracles for the test suite.

Everything here is deliberately written without the library's own vectorized
kernels: convolution is a nested loop, gradients come from central finite
differences, and FLOPs are re-counted layer by layer.
"""

import numpy as np
import pytest

from goldnas import autodiff as ad


def naive_conv2d(x, w, stride=1, groups=1, padding=0):
    """Reference cross-correlation: plain nested loops over every output
    element.  Slow but obviously correct."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    B, Cin, H, W = x.shape
    Cout, Cin_g, kh, kw = w.shape
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    Hout = (H + 2 * p - kh) // stride + 1
    Wout = (W + 2 * p - kw) // stride + 1
    out = np.zeros((B, Cout, Hout, Wout))
    cin_per_g = Cin // groups
    cout_per_g = Cout // groups
    for b in range(B):
        for co in range(Cout):
            g = co // cout_per_g
            for oh in range(Hout):
                for ow in range(Wout):
                    acc = 0.0
                    for ci in range(cin_per_g):
                        for i in range(kh):
                            for j in range(kw):
                                acc += (
                                    xp[b, g * cin_per_g + ci, oh * stride + i, ow * stride + j]
                                    * w[co, ci, i, j]
                                )
                    out[b, co, oh, ow] = acc
    return out


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradients of scalar f with respect to each array
    in ``arrays`` (mutated in place during probing, restored afterwards)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(1e-12, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / denom


def param_count(net):
    return sum(p.size for _, p in net.omega) + len(net.alpha)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
