"""A small reverse-mode autodiff engine over numpy arrays.

Each ``Tensor`` records its parents and a closure that pushes the output
gradient back to them. ``backward`` walks the graph in reverse topological
order. Only the operations the transformer needs are provided.
"""
from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def _make(self, data, parents, backward):
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else ())
        if needs:
            out._backward = backward
        return out

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        a, b = self, other

        def back(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))
        return self._make(a.data + b.data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return self._make(-a.data, (a,), lambda g: a._accum(-g))

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))
        return self._make(a.data * b.data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        a, b = self, other
        out_data = a.data / b.data

        def back(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * out_data / b.data, b.shape))
        return self._make(out_data, (a, b), back)

    def __pow__(self, p):
        a = self
        p = float(p)
        return self._make(a.data ** p, (a,), lambda g: a._accum(g * p * a.data ** (p - 1.0)))

    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self, other

        def back(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                if b.ndim == 2:
                    k = a.shape[-1]
                    gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
                else:
                    gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
                b._accum(gb)
        return self._make(a.data @ b.data, (a, b), back)

    # reductions and shape ------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))
        return self._make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        a = self
        return self._make(a.data.reshape(*shape), (a,), lambda g: a._accum(g.reshape(a.shape)))

    def transpose(self, *axes):
        a = self
        inv = np.argsort(axes)
        return self._make(a.data.transpose(*axes), (a,), lambda g: a._accum(g.transpose(*inv)))

    def take(self, indices, axis=-1):
        """Select ``indices`` along ``axis`` (the gather used for pruned channels)."""
        a = self
        indices = np.asarray(indices, dtype=np.intp)

        def back(g):
            full = np.zeros(a.shape)
            idx = [slice(None)] * a.ndim
            idx[axis] = indices
            np.add.at(full, tuple(idx), g)
            a._accum(full)
        return self._make(np.take(a.data, indices, axis=axis), (a,), back)

    def scatter(self, indices, size, axis=-1):
        """Place this tensor's slices at ``indices`` of a zero tensor of length ``size``."""
        a = self
        indices = np.asarray(indices, dtype=np.intp)
        shape = list(a.shape)
        shape[axis] = size
        out = np.zeros(shape)
        idx = [slice(None)] * a.ndim
        idx[axis] = indices
        out[tuple(idx)] = a.data
        return self._make(out, (a,), lambda g: a._accum(np.take(g, indices, axis=axis)))

    # elementwise ---------------------------------------------------------
    def exp(self):
        a = self
        out = np.exp(a.data)
        return self._make(out, (a,), lambda g: a._accum(g * out))

    def log(self):
        a = self
        return self._make(np.log(a.data), (a,), lambda g: a._accum(g / a.data))

    def sigmoid(self):
        a = self
        out = _sigmoid(a.data)
        return self._make(out, (a,), lambda g: a._accum(g * out * (1.0 - out)))

    def gelu(self):
        """tanh-form GELU; smooth everywhere, so finite differences stay clean."""
        a = self
        x = a.data
        x2 = x * x
        inner = _GELU_C * x * (1.0 + 0.044715 * x2)
        th = np.tanh(inner)
        out = 0.5 * x * (1.0 + th)

        def back(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            a._accum(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner))
        return self._make(out, (a,), back)

    def softmax(self, axis=-1):
        a = self
        z = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            a._accum(out * (g - np.sum(g * out, axis=axis, keepdims=True)))
        return self._make(out, (a,), back)

    def log_softmax(self, axis=-1):
        a = self
        z = a.data - a.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse
        sm = np.exp(out)

        def back(g):
            a._accum(g - sm * np.sum(g, axis=axis, keepdims=True))
        return self._make(out, (a,), back)

    def layer_norm(self, gamma, beta, eps=1e-5):
        """Normalize over the last axis, then scale and shift."""
        a, gamma, beta = self, _wrap(gamma), _wrap(beta)
        x = a.data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gamma.data + beta.data

        def back(g):
            if gamma.requires_grad:
                gamma._accum(_unbroadcast(g * xhat, gamma.shape))
            if beta.requires_grad:
                beta._accum(_unbroadcast(g, beta.shape))
            if a.requires_grad:
                gx = g * gamma.data
                dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                            - xhat * np.mean(gx * xhat, axis=-1, keepdims=True))
                a._accum(dx)
        return self._make(out, (a, gamma, beta), back)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


sigmoid = _sigmoid
