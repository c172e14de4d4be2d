"""Define-by-run reverse-mode autodiff over float32 numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
computing the parents' gradient contributions.  Gradients accumulate with
``+=`` so a tensor reused by several branches (shared weights) receives the
sum of all contributions.
"""
from __future__ import annotations

import numpy as np

from . import kernels

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphStateError(RuntimeError):
    """Raised when backward is requested without a recorded forward pass."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise GraphStateError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._backward is None and not self._parents:
            raise GraphStateError("backward called on a tensor with no recorded forward pass")
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
        grads = {id(self): np.ones(self.shape, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
            # free the closure so a graph cannot be replayed
            node._backward = _consumed
            node._parents = ()

    # a few conveniences used by tests and loss bookkeeping
    def __add__(self, other):
        return add(self, other)

    def sum(self):
        return sum_all(self)


def _consumed(g):
    raise GraphStateError("graph already consumed by a previous backward pass")


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), _backward=backward if req else None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sum_all(x):
    return _make(np.array(x.data.sum(dtype=np.float64), dtype=DTYPE).reshape(()), (x,),
                 lambda g: (np.full(x.shape, g, dtype=DTYPE),))


def scale(x, c):
    return _make(x.data * DTYPE(c), (x,), lambda g: (g * DTYPE(c),))


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def concat(xs, axis=1):
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, back)


def gather_rows(x, index):
    """Select rows ``x[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), back)


# ---------------------------------------------------------------- layers


def linear(x, weight, bias=None):
    """``y = x @ W.T + b`` with ``W`` of shape (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"fully-connected: input has {x.shape[-1]} features, weight expects {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, back)


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Cross-correlation; ``weight`` is (out_ch, in_ch, kh, kw)."""
    n, c, h, w = _check4(x, "conv2d")
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ic}")
    oh, ow = kernels.out_size(h, kh, stride, pad), kernels.out_size(w, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    wm = weight.data.reshape(oc, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)

    def back(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, oc)
        gw = (gm.T @ cols).reshape(weight.shape)
        gx = kernels.col2im(gm @ wm, x.shape, kh, kw, stride, pad) if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(np.ascontiguousarray(out), parents, back)


def conv_transpose2d(x, weight, bias=None, stride=1, pad=0):
    """Transposed convolution; ``weight`` is (in_ch, out_ch, kh, kw).

    Output extent is ``(in - 1) * stride - 2 * pad + kernel``.
    """
    n, c, h, w = _check4(x, "transposed-conv2d")
    ic, oc, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"transposed-conv2d: input has {c} channels, weight expects {ic}")
    oh, ow = (h - 1) * stride - 2 * pad + kh, (w - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise ShapeError(f"transposed-conv2d: non-positive output extent {oh}x{ow}")
    rows = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, c)
    wm = weight.data.reshape(ic, -1)
    out = kernels.col2im(rows @ wm, (n, oc, oh, ow), kh, kw, stride, pad)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        gcols = kernels.im2col(np.ascontiguousarray(g), kh, kw, stride, pad)
        gw = (rows.T @ gcols).reshape(weight.shape)
        gx = (gcols @ wm.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, back)


def max_pool2d(x, kernel, stride):
    n, c, h, w = _check4(x, "max-pool")
    if kernel > h or kernel > w:
        raise ShapeError(f"max-pool: window {kernel} larger than input {h}x{w}")
    out, arg = kernels.maxpool_forward(x.data, kernel, stride)
    return _make(out, (x,), lambda g: (kernels.maxpool_backward(g, arg, x.shape),))


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = logits.data.astype(np.float64)
    if z.ndim != 2 or z.shape[0] != labels.size:
        raise ShapeError(f"softmax-cross-entropy: logits {logits.shape} vs {labels.size} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= z.shape[1]:
        raise ValueError(f"softmax-cross-entropy: label out of range for {z.shape[1]} classes")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.size
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((p * (float(g) / n)).astype(DTYPE),)

    return _make(np.array(loss, dtype=DTYPE), (logits,), back)


def euclidean_loss(x, target, weight=None, scale=1.0):
    """``0.5 * scale * sum(weight * (x - target)**2)``.

    ``weight`` (same shape as ``x``) rescales each element's gradient, which
    is how heatmap reweighting is expressed.
    """
    t = np.asarray(target, dtype=DTYPE)
    if t.shape != x.shape:
        raise ShapeError(f"euclidean-loss: prediction {x.shape} vs target {t.shape}")
    diff = x.data.astype(np.float64) - t
    wd = diff if weight is None else diff * weight
    loss = 0.5 * scale * float((wd * diff).sum())
    return _make(np.array(loss, dtype=DTYPE), (x,), lambda g: ((wd * (float(g) * scale)).astype(DTYPE),))


def _check4(x, what):
    if x.data.ndim != 4:
        raise ShapeError(f"{what}: expected (N, C, H, W) input, got shape {x.shape}")
    return x.shape
