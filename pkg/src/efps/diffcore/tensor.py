"""Reverse-mode autodiff on dense numpy arrays.

Every operation builds a node holding its parents and a closure that routes
the node's accumulated gradient back to them.  `Tensor.backward()` walks the
graph once in reverse topological order.  Convolution runs as im2col plus a
single matrix product so the heavy lifting stays inside BLAS; its backward
reuses the cached column matrix for the weight gradient and scatters the
input gradient with one strided add per kernel tap.

Dtype follows the data: build parameters in float64 for finite-difference
checks, float32 for training.  Scalar constants do not promote (NEP 50).
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np


class DiffError(ValueError):
    """Raised on shape mismatches and invalid layer configurations."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _accumulate(t: "Tensor", g: np.ndarray) -> None:
    # copy on first write: g may alias another node's gradient buffer
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _accumulate_owned(t: "Tensor", g: np.ndarray) -> None:
    # for gradients freshly allocated by the caller; takes ownership, no copy
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A numpy array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn = None

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _result(data, parents, backward_fn) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    def backward(self, grad=None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- basic introspection ----------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- arithmetic --------------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        if not isinstance(other, Tensor):
            a, s = self, other

            def backward_s(g):
                _accumulate(a, g)

            return self._result(a.data + s, (a,), backward_s)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.data.shape))

        return self._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            _accumulate(a, -g)

        return self._result(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        if not isinstance(other, Tensor):
            return (-self) + other
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            a, s = self, other

            def backward_s(g):
                _accumulate(a, g * s)

            return self._result(a.data * s, (a,), backward_s)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

        return self._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Tensor):
            return self * (1.0 / other)
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return self._result(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        if not isinstance(other, Tensor):
            a, s = self, other

            def backward_s(g):
                _accumulate(a, -g * s / (a.data * a.data))

            return self._result(s / a.data, (a,), backward_s)
        return self._wrap(other) / self

    def __pow__(self, exponent: float):
        a = self
        e = float(exponent)

        def backward(g):
            _accumulate(a, g * e * a.data ** (e - 1.0))

        return self._result(a.data**e, (a,), backward)

    def square(self):
        a = self

        def backward(g):
            _accumulate(a, g * (2.0 * a.data))

        return self._result(a.data * a.data, (a,), backward)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def backward(g):
            _accumulate(a, g * (0.5 / out_data))

        return self._result(out_data, (a,), backward)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def backward(g):
            if axis is None:
                _accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
                return
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype))

        return self._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.data.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- shape ops ---------------------------------------------------------

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def backward(g):
            _accumulate(a, g.reshape(a.data.shape))

        return self._result(a.data.reshape(shape), (a,), backward)

    def transpose(self, *axes):
        a = self
        inverse = np.argsort(axes)

        def backward(g):
            _accumulate(a, g.transpose(inverse))

        return self._result(a.data.transpose(axes), (a,), backward)

    # -- activations -------------------------------------------------------

    def relu(self):
        a = self
        mask = a.data > 0

        def backward(g):
            _accumulate(a, g * mask)

        return self._result(np.where(mask, a.data, 0.0), (a,), backward)

    def leaky_relu(self, slope: float = 0.01):
        a = self
        mask = a.data > 0

        def backward(g):
            _accumulate(a, g * np.where(mask, 1.0, slope).astype(a.data.dtype))

        return self._result(np.where(mask, a.data, slope * a.data), (a,), backward)

    def sigmoid(self):
        a = self
        # clip keeps exp in range; past +-60 the output saturates exactly anyway
        out_data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))

        def backward(g):
            _accumulate(a, g * (out_data * (1.0 - out_data)))

        return self._result(out_data, (a,), backward)

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)

        def backward(g):
            _accumulate(a, g * (1.0 - out_data * out_data))

        return self._result(out_data, (a,), backward)

    def clip(self, lo: float, hi: float):
        a = self
        inside = (a.data > lo) & (a.data < hi)

        def backward(g):
            _accumulate(a, g * inside)

        return self._result(np.clip(a.data, lo, hi), (a,), backward)

    def acos(self):
        a = self

        def backward(g):
            _accumulate(a, g * (-1.0 / np.sqrt(1.0 - a.data * a.data)))

        return self._result(np.arccos(a.data), (a,), backward)

    # -- linear algebra ----------------------------------------------------

    def matmul(self, other: "Tensor"):
        other = self._wrap(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise DiffError(
                f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}"
            )
        if a.data.shape[1] != b.data.shape[0]:
            raise DiffError(
                f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
            )

        def backward(g):
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)

        return self._result(a.data @ b.data, (a, b), backward)

    __matmul__ = matmul


# -- structured ops --------------------------------------------------------


def cat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along an axis; backward splits the gradient."""
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parents = tuple(tensors)

    def backward(g):
        for t, lo, hi in zip(parents, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(index)])

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(data, parents, backward)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 on the two trailing axes of an NCHW tensor."""
    a = x
    n, c, h, w = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    data = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)
    return Tensor._result(data, (a,), backward)


def downsample2x(x: Tensor) -> Tensor:
    """Keep every second row and column of an NCHW tensor."""
    a = x

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, :, ::2, ::2] = g
        _accumulate(a, full)

    return Tensor._result(np.ascontiguousarray(a.data[:, :, ::2, ::2]), (a,), backward)


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int):
    """Lower padded NCHW input to a (C*KH*KW, N*OH*OW) column matrix.

    Filled one kernel tap at a time so each copy runs over contiguous
    spatial spans instead of the tiny kernel-window strides.
    """
    n, c, h, w = padded.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=padded.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = padded[
                :, :, i : i + oh * stride : stride, j : j + ow * stride : stride
            ].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow), oh, ow


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlate NCHW input with (F, C, KH, KW) weights."""
    a, w_t = x, weight
    n, c, h, w = a.data.shape
    f, c_w, kh, kw = w_t.data.shape
    if c != c_w:
        raise DiffError(f"conv2d expects {c_w} input channels, got {c}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DiffError(
            f"kernel {kh}x{kw} does not fit padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.data.shape != (f,):
        raise DiffError(f"bias shape {bias.data.shape} does not match {f} filters")

    padded = _pad_nchw(a.data, padding) if padding else a.data
    cols, oh, ow = _im2col(padded, kh, kw, stride)
    w_mat = w_t.data.reshape(f, c * kh * kw)
    out_mat = w_mat @ cols
    if bias is not None:
        out_mat += bias.data[:, None]
    out_data = np.ascontiguousarray(
        out_mat.reshape(f, n, oh, ow).transpose(1, 0, 2, 3)
    )

    parents = (a, w_t) if bias is None else (a, w_t, bias)

    def backward(g):
        g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * oh * ow)
        if bias is not None and bias.requires_grad:
            _accumulate_owned(bias, g_mat.sum(axis=1))
        if w_t.requires_grad:
            _accumulate_owned(w_t, (g_mat @ cols.T).reshape(w_t.data.shape))
        if a.requires_grad:
            g_cols = (w_mat.T @ g_mat).reshape(c, kh, kw, n, oh, ow)
            g_padded = np.zeros(
                (n, c, h + 2 * padding, w + 2 * padding), dtype=a.data.dtype
            )
            for i in range(kh):
                for j in range(kw):
                    g_padded[
                        :, :, i : i + oh * stride : stride, j : j + ow * stride : stride
                    ] += g_cols[:, i, j].transpose(1, 0, 2, 3)
            if padding:
                g_input = np.ascontiguousarray(
                    g_padded[:, :, padding : padding + h, padding : padding + w]
                )
            else:
                g_input = g_padded
            _accumulate_owned(a, g_input)

    return Tensor._result(out_data, parents, backward)


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
    """Per-channel normalization of an NCHW tensor with affine scale/shift.

    Train mode uses biased batch statistics over (N, H, W) and folds them
    into the running arrays in place; eval mode reads the running arrays and
    differentiates through the input only.
    """
    a = x
    n, c, h, w = a.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DiffError(f"affine shape {gamma.data.shape} does not match {c} channels")
    axes = (0, 2, 3)
    if training:
        if n < 2:
            raise DiffError("batch too small for batch statistics")
        mean = a.data.mean(axis=axes)
        var = a.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(a.data.dtype)
        var = running_var.astype(a.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (a.data - mean[:, None, None]) * inv_std[:, None, None]
    out_data = gamma.data[:, None, None] * x_hat + beta.data[:, None, None]

    def backward(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if gamma.requires_grad:
            _accumulate(gamma, (g * x_hat).sum(axis=axes))
        if a.requires_grad:
            scale = (gamma.data * inv_std)[:, None, None]
            if training:
                count = n * h * w
                g_mean = g.mean(axis=axes)[:, None, None]
                gx_mean = (g * x_hat).sum(axis=axes)[:, None, None] / count
                _accumulate(a, scale * (g - g_mean - x_hat * gx_mean))
            else:
                _accumulate(a, scale * g)

    return Tensor._result(out_data, (a, gamma, beta), backward)
