"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations needed by the gated super-network are provided:
2-d convolution (with groups/stride/padding), batch normalization,
relu/sigmoid, elementwise arithmetic, channel concat, global average
pooling, a linear classifier head and softmax cross-entropy.

Everything runs in float64 by default so that finite-difference checks
can be tight.  Gradient accumulation order is fixed (reverse creation
order, which is a valid reverse topological order because parents are
always created before children), making backward passes reproducible.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_counter = itertools.count()


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are inconsistent."""


class Tensor:
    """A node of the computation tape.

    Leaf tensors hold parameters or inputs; interior tensors remember
    their parents and a closure that scatters the upstream gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = _parents
        self._backward = _backward
        self._id = next(_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def grad_array(self) -> np.ndarray:
        """Gradient of the last backward pass; zeros for unused leaves."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backward ----------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` on every reachable tensor, seeding from self.

        The receiver must be scalar.  Each node is visited exactly once,
        in reverse creation order.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        nodes = _reachable(self)
        for n in nodes:
            n.grad = np.zeros_like(n.data)
        self.grad = np.ones_like(self.data)
        for n in sorted(nodes, key=lambda t: t._id, reverse=True):
            if n._backward is not None and n.requires_grad:
                n._backward(n.grad)


def _reachable(root: Tensor) -> list:
    seen = {id(root): root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    return list(seen.values())


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _require_broadcastable(a: Tensor, b: Tensor, op: str):
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeMismatchError(
        f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}"
    )


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    # only scalar broadcasting is supported
    return np.sum(grad).reshape(shape)


# -- primitives ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_broadcastable(a, b, "add")
    out = Tensor(a.data + b.data, _parents=(a, b))

    def backward(g):
        a.grad += _reduce_to(g, a.data.shape)
        b.grad += _reduce_to(g, b.data.shape)

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_broadcastable(a, b, "mul")
    out = Tensor(a.data * b.data, _parents=(a, b))

    def backward(g):
        a.grad += _reduce_to(g * b.data, a.data.shape)
        b.grad += _reduce_to(g * a.data, b.data.shape)

    out._backward = backward
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _require_broadcastable(a, b, "div")
    out = Tensor(a.data / b.data, _parents=(a, b))

    def backward(g):
        a.grad += _reduce_to(g / b.data, a.data.shape)
        b.grad += _reduce_to(-g * a.data / (b.data * b.data), b.data.shape)

    out._backward = backward
    return out


def scalar_scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python constant (no gradient flows into the constant)."""
    out = Tensor(x.data * s, _parents=(x,))

    def backward(g):
        x.grad += g * s

    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0), _parents=(x,))

    def backward(g):
        x.grad += g * mask

    out._backward = backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    out = Tensor(y, _parents=(x,))

    def backward(g):
        x.grad += g * y * (1.0 - y)

    out._backward = backward
    return out


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # numerically stable logistic
    pos = z >= 0
    out = np.empty_like(z, dtype=DTYPE)
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log1p(x: Tensor) -> Tensor:
    out = Tensor(np.log1p(x.data), _parents=(x,))

    def backward(g):
        x.grad += g / (1.0 + x.data)

    out._backward = backward
    return out


def tsum(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data), _parents=(x,))

    def backward(g):
        x.grad += np.broadcast_to(g, x.data.shape)

    out._backward = backward
    return out


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(
            f"elementwise_add: shapes {a.data.shape} != {b.data.shape}"
        )
    return add(a, b)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum a non-empty list of same-shaped tensors in list order."""
    if not tensors:
        raise ValueError("add_n requires at least one tensor")
    acc = tensors[0]
    for t in tensors[1:]:
        acc = elementwise_add(acc, t)
    return acc


def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("channel_concat requires at least one tensor")
    base = tensors[0].data.shape
    for t in tensors:
        s = t.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeMismatchError(
                f"channel_concat: shape {s} incompatible with {base}"
            )
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1), _parents=tuple(tensors))
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def backward(g):
        for t, gpart in zip(tensors, np.split(g, splits, axis=1)):
            t.grad += gpart

    out._backward = backward
    return out


def global_average_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"global_average_pool expects 4-d input, got {x.data.shape}")
    B, C, H, W = x.data.shape
    out = Tensor(x.data.mean(axis=(2, 3)), _parents=(x,))

    def backward(g):
        x.grad += g[:, :, None, None] / (H * W)

    out._backward = backward
    return out


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatchError(
            f"linear: input {x.data.shape} incompatible with weight {w.data.shape}"
        )
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, _parents=parents)

    def backward(g):
        x.grad += g @ w.data.T
        w.grad += x.data.T @ g
        if b is not None:
            b.grad += g.sum(axis=0)

    out._backward = backward
    return out


def conv2d(x: Tensor, w: Tensor, stride: int = 1, groups: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernel."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatchError(
            f"conv2d: expected 4-d input/kernel, got {x.data.shape} / {w.data.shape}"
        )
    B, Cin, H, W = x.data.shape
    Cout, Cin_g, kh, kw = w.data.shape
    if Cin % groups != 0 or Cout % groups != 0:
        raise ShapeMismatchError(
            f"conv2d: channels in={Cin} out={Cout} not divisible by groups={groups}"
        )
    if Cin_g != Cin // groups:
        raise ShapeMismatchError(
            f"conv2d: kernel expects {Cin_g} channels per group, input has {Cin // groups}"
        )
    s, p = int(stride), int(padding)
    Hout = (H + 2 * p - kh) // s + 1
    Wout = (W + 2 * p - kw) // s + 1
    if Hout < 1 or Wout < 1:
        raise ShapeMismatchError(
            f"conv2d: kernel {kh}x{kw} too large for padded input {H + 2 * p}x{W + 2 * p}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[
        :, :, ::s, ::s
    ]  # (B, Cin, Hout, Wout, kh, kw)
    wing = win.reshape(B, groups, Cin_g, Hout, Wout, kh, kw)
    wg = w.data.reshape(groups, Cout // groups, Cin_g, kh, kw)
    y = np.einsum("bgihwkl,goikl->bgohw", wing, wg, optimize=True)
    out = Tensor(y.reshape(B, Cout, Hout, Wout), _parents=(x, w))

    def backward(g):
        gog = g.reshape(B, groups, Cout // groups, Hout, Wout)
        w.grad += np.einsum("bgohw,bgihwkl->goikl", gog, wing, optimize=True).reshape(
            w.data.shape
        )
        dwin = np.einsum("bgohw,goikl->bgihwkl", gog, wg, optimize=True).reshape(
            B, Cin, Hout, Wout, kh, kw
        )
        dxp = np.zeros((B, Cin, H + 2 * p, W + 2 * p), dtype=DTYPE)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki : ki + s * Hout : s, kj : kj + s * Wout : s] += dwin[
                    :, :, :, :, ki, kj
                ]
        x.grad += dxp[:, :, p : p + H, p : p + W] if p else dxp

    out._backward = backward
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over an NCHW tensor.

    In training mode the (biased) batch statistics normalize the batch and
    update the running buffers in place; in eval mode the frozen running
    statistics are used and treated as constants by backward.
    """
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"batch_norm expects 4-d input, got {x.data.shape}")
    C = x.data.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeMismatchError(
            f"batch_norm: affine shapes {gamma.data.shape}/{beta.data.shape} != ({C},)"
        )
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * ivar[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(y, _parents=(x, gamma, beta))
    M = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    def backward(g):
        gamma.grad += np.einsum("bchw,bchw->c", g, xhat)
        beta.grad += g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3))
            s2 = np.einsum("bchw,bchw->c", dxhat, xhat)
            x.grad += (
                ivar[None, :, None, None]
                / M
                * (M * dxhat - s1[None, :, None, None] - xhat * s2[None, :, None, None])
            )
        else:
            x.grad += dxhat * ivar[None, :, None, None]

    out._backward = backward
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B, K) logits against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeMismatchError(
            f"softmax_cross_entropy expects 2-d logits, got {logits.data.shape}"
        )
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.data.shape
    if labels.shape != (B,):
        raise ShapeMismatchError(
            f"softmax_cross_entropy: labels shape {labels.shape} != ({B},)"
        )
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(B), labels])
    out = Tensor(nll.mean(), _parents=(logits,))

    def backward(g):
        d = probs.copy()
        d[np.arange(B), labels] -= 1.0
        logits.grad += (float(g) / B) * d

    out._backward = backward
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE))
