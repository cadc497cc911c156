"""Reverse-mode differentiation over the handful of ops the ECG network needs.

A :class:`Tensor` records its parents and a closure that pushes its gradient
back to them. Only tensors with ``requires_grad`` (parameters, and anything
computed from them) build the graph, so inference runs without bookkeeping.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # intermediate; only leaves keep gradients


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    track = any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)
    return _make(a.data + b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    def backward(g):
        x._accum(g * mask)
    return _make(np.maximum(x.data, 0), (x,), backward)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    def backward(g):
        x._accum(g * s * (1 - s))
    return _make(s, (x,), backward)


# --- linear algebra --------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x (N, F), w (F, K), b (K,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot multiply {x.shape} by {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=0))
    return _make(out, parents, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           groups: int = 1) -> Tensor:
    """Grouped cross-correlation with symmetric zero padding of (k-1)/2.

    x is (B, C_in, L), w is (C_out, C_in/groups, k) with k odd; the output has
    length ceil(L / stride).
    """
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError("conv1d expects x (B, C, L) and w (C_out, C_in/groups, k)")
    bsz, cin, length = x.shape
    cout, cin_g, k = w.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d kernel must be odd, got {k}")
    if cin % groups or cout % groups or cin // groups != cin_g:
        raise ShapeError(f"conv1d: {cin} input / {cout} output channels incompatible with "
                         f"groups={groups} and kernel shape {w.shape}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv1d bias shape {b.shape} != ({cout},)")
    pad = (k - 1) // 2
    lout = -(-length // stride)
    cout_g = cout // groups

    xd = x.data
    if k == 1:
        cols = xd[:, :, ::stride][:, :, :lout].reshape(bsz, groups, cin_g, lout)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
        win = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :lout]  # B,C,Lout,k
        cols = (win.reshape(bsz, groups, cin_g, lout, k)
                   .transpose(0, 1, 2, 4, 3)
                   .reshape(bsz, groups, cin_g * k, lout))
    wr = w.data.reshape(groups, cout_g, cin_g * k)
    out = np.matmul(wr, cols).reshape(bsz, cout, lout)
    if b is not None:
        out += b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gr = g.reshape(bsz, groups, cout_g, lout)
        if w.requires_grad:
            gw = np.matmul(gr, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            w._accum(gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wr.transpose(0, 2, 1), gr)  # B,G,Cin_g*k,Lout
            if k == 1:
                dx = np.zeros_like(xd)
                dx[:, :, ::stride][:, :, :lout] = dcols.reshape(bsz, cin, lout)
            else:
                dcols = dcols.reshape(bsz, cin, k, lout)
                dxp = np.zeros((bsz, cin, length + 2 * pad), dtype=xd.dtype)
                span = stride * (lout - 1) + 1
                for j in range(k):
                    dxp[:, :, j:j + span:stride] += dcols[:, :, j, :]
                dx = dxp[:, :, pad:pad + length]
            x._accum(dx)
    return _make(out, parents, backward)


# --- reductions / reshaping ------------------------------------------------

def mean_length(x: Tensor) -> Tensor:
    """Global average over the last axis: (B, C, L) -> (B, C)."""
    length = x.shape[-1]
    def backward(g):
        x._accum(np.broadcast_to(g[..., None] / length, x.shape))
    return _make(x.data.mean(axis=-1), (x,), backward)


def scale_channels(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply (B, C, L) by a per-(B, C) gate."""
    if gate.shape != x.shape[:2]:
        raise ShapeError(f"gate shape {gate.shape} does not match {x.shape[:2]}")
    def backward(g):
        if x.requires_grad:
            x._accum(g * gate.data[..., None])
        if gate.requires_grad:
            gate._accum((g * x.data).sum(axis=-1))
    return _make(x.data * gate.data[..., None], (x, gate), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over (batch, length).

    In training mode batch statistics are used and the running estimates are
    updated in place; otherwise the running estimates are used as constants.
    """
    xd = x.data
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have shape ({c},)")
    if training:
        mean = xd.mean(axis=(0, 2))
        var = xd.var(axis=(0, 2))
        n = xd.shape[0] * xd.shape[2]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean[None, :, None]) * inv[None, :, None]
    out = xhat * gamma.data[None, :, None] + beta.data[None, :, None]

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2)))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None]
            if training:
                m1 = gx.mean(axis=(0, 2), keepdims=True)
                m2 = (gx * xhat).mean(axis=(0, 2), keepdims=True)
                x._accum((gx - m1 - xhat * m2) * inv[None, :, None])
            else:
                x._accum(gx * inv[None, :, None])
    return _make(out, (x, gamma, beta), backward)


# --- composite ops ---------------------------------------------------------

def se_attention(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Squeeze-excitation channel gating.

    squeeze = mean over length, gate = sigmoid(w2 @ relu(w1 @ squeeze)),
    with w1 (C/r, C) and w2 (C, C/r).
    """
    c = x.shape[1]
    if w1.shape[1] != c or w2.shape != (c, w1.shape[0]):
        raise ShapeError(f"se_attention weights {w1.shape}, {w2.shape} do not fit {c} channels")
    squeeze = mean_length(x)
    hidden = relu(linear(squeeze, transpose(w1)))
    gate = sigmoid(linear(hidden, transpose(w2)))
    return scale_channels(x, gate)


def transpose(w: Tensor) -> Tensor:
    def backward(g):
        w._accum(g.T)
    return _make(w.data.T, (w,), backward)


# --- loss ------------------------------------------------------------------

def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy, ``max(z,0) - z*y + log1p(exp(-|z|))``."""
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError(f"labels shape {y.shape} != logits shape {z.shape}")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def backward(g):
        logits._accum(g * (_sigmoid(z) - y) / n)
    return _make(np.asarray(per.mean(), dtype=z.dtype), (logits,), backward)
