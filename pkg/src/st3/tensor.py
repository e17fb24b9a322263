"""Tape-based reverse-mode autodiff over dense numpy arrays.

Every op is eager: it computes its output immediately and, when a :class:`Tape`
is active and at least one input requires a gradient, appends a node holding a
backward closure. ``Tape.backward`` then walks the nodes in reverse order.

Arrays are float32 unless the caller hands in float64 data explicitly (used by
the gradient checks, where finite differences need the extra precision).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count(1)
_active: list["Tape"] = []


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray):
        if dtype is not None:
            return data.astype(dtype, copy=False)
        if data.dtype == np.float64:
            return data
        return data.astype(np.float32, copy=False)
    return np.asarray(data, dtype=dtype or np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _id(self) -> int:
        if self.node_id is None:
            self.node_id = next(_ids)
        return self.node_id

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the block are recorded.
    After ``backward``, gradients of leaf tensors land in ``tensor.grad``
    (accumulated) and gradients of any recorded tensor are available through
    :meth:`grad_of`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._produced: set[int] = set()
        self._done = False

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, op, inputs, output, backward) -> None:
        for t in inputs:
            t._id()
        output._id()
        self._produced.add(output.node_id)
        self.nodes.append(Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if self._done:
            raise RuntimeError("backward already ran on this tape")
        self._done = True
        if loss.node_id not in self._produced:
            raise RuntimeError("loss was not produced on this tape")
        if grad is None:
            if loss.size != 1:
                raise ShapeError("backward needs an explicit gradient for non-scalar outputs")
            grad = np.ones_like(loss.data)
        grads = self.grads
        grads[loss.node_id] = _as_array(grad, loss.data.dtype)
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g_out = grads.get(node.output.node_id)
            if g_out is None:
                continue
            g_in = node.backward(g_out)
            for t, g in zip(node.inputs, g_in):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise ShapeError(f"{node.op}: gradient shape {g.shape} != input shape {t.shape}")
                tid = t.node_id
                if tid in grads:
                    grads[tid] = grads[tid] + g
                else:
                    grads[tid] = g
                if tid not in self._produced:
                    leaves[tid] = t
        for tid, t in leaves.items():
            g = grads[tid].astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        if t.node_id is None:
            return None
        return self.grads.get(t.node_id)


def _tape_for(inputs) -> Tape | None:
    if not _active:
        return None
    if any(t.requires_grad for t in inputs):
        return _active[-1]
    return None


def _result(op: str, data: np.ndarray, inputs, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = _tape_for(inputs)
    out = Tensor(data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise / structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    x, y = a.data, b.data
    return _result("mul", x * y, (a, b), lambda g: (g * y, g * x))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result("mul_scalar", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result("add_scalar", a.data + c, (a,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias: ``x`` is (N, C) or (N, C, H, W), ``b`` is (C,)."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    extra = x.data.ndim - 2
    bview = b.data.reshape((1, -1) + (1,) * extra)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _result("add_bias", x.data + bview, (x, b), lambda g: (g, g.sum(axis=axes)))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                   lambda g: (g * mask,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]})")
    x, y = a.data, b.data
    return _result("matmul", x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ b)`` with ``w`` stored as (out_features, in_features)."""
    if w.data.ndim != 2 or x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = _result("linear", xd @ wd.T, (x, w), lambda g: (g @ wd, g.T @ xd))
    return out if b is None else add_bias(out, b)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (B, Cin, H, W); ``w``: (Cout, Cin, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: non-positive output size {Ho}x{Wo}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        dxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += \
                    dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
        return dx, dw

    return _result("conv2d", np.ascontiguousarray(out), (x, w), backward)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling (stride k); H and W must divide by k."""
    B, C, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {k}")
    out = x.data.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))
    scale = x.data.dtype.type(1.0 / (k * k))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) * scale,)

    return _result("avg_pool2d", out.astype(x.data.dtype, copy=False), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    return reshape(_mean_hw(x), x.shape[:2])


def _mean_hw(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    scale = x.data.dtype.type(1.0 / (H * W))
    out = x.data.mean(axis=(2, 3), keepdims=True).astype(x.data.dtype)
    return _result("mean_hw", out, (x,),
                   lambda g: (np.broadcast_to(g, x.shape) * scale,))


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, momentum: float = 0.1,
                 eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, PyTorch convention). In eval mode the
    running buffers are used and left untouched.
    """
    B, C, H, W = x.shape
    dt = x.data.dtype
    xd = x.data
    if training:
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        n = B * H * W
        unbiased = var * n / max(n - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (xd - mean.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
    out = xhat * gamma.data.reshape(1, C, 1, 1) + beta.data.reshape(1, C, 1, 1)
    gd = gamma.data

    def backward(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * gd.reshape(1, C, 1, 1)
        if training:
            n = B * H * W
            dx = (inv_std.reshape(1, C, 1, 1) / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv_std.reshape(1, C, 1, 1)
        return dx.astype(dt, copy=False), dgamma, dbeta

    return _result("batch_norm2d", out.astype(dt, copy=False), (x, gamma, beta), backward)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, classes) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.asarray((logsum - z[np.arange(n), labels]).mean(), dtype=logits.data.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1
        return ((p * (g / n)).astype(logits.data.dtype, copy=False),)

    return _result("softmax_cross_entropy", loss, (logits,), backward)


def straight_through(raw: Tensor, forward_value: Tensor | np.ndarray) -> Tensor:
    """Return ``forward_value`` in the forward pass; route gradients to ``raw`` unchanged.

    ``forward_value`` is treated as a constant, so whatever produced it is not
    differentiated through.
    """
    fv = forward_value.data if isinstance(forward_value, Tensor) else _as_array(forward_value, raw.data.dtype)
    if fv.shape != raw.shape:
        raise ShapeError(f"straight_through: raw {raw.shape} vs forward value {fv.shape}")
    return _result("straight_through", fv.astype(raw.data.dtype, copy=True), (raw,), lambda g: (g,))
