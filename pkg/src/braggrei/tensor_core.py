"""A small reverse-mode autodiff over numpy arrays.

Only the primitives the encoder, projector and predictor need are provided.
Tensors keep the dtype they were created with: float32 for training,
float64 for gradient checks.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf", name=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, op="detach")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate gradients into every ``requires_grad`` ancestor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch(f"backward: implicit seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(tape(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad


def tape(output: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``output`` (inputs first)."""
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    parents = tuple(parents)
    if not any(_needs_grad(p) for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),), "scale")


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _result(np.where(on, x.data, 0).astype(x.dtype), (x,), lambda g: (g * on,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def total(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),), "mean")


def row_sum(x: Tensor) -> Tensor:
    return _result(x.data.sum(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None], x.shape).copy(),),
                   "row_sum")


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``kernel`` (O, C, k, k)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1] \
            or kernel.shape[2] != kernel.shape[3]:
        raise ShapeMismatch(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeMismatch(f"conv2d: bias {bias.shape} for {kernel.shape[0]} output channels")
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeMismatch(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = kernel.data.reshape(o, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (g2.T @ cols).reshape(kernel.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(np.ascontiguousarray(out), parents, backward, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column of an (N, D) batch with batch statistics, then scale and shift."""
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeMismatch(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0]
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    inv = (1.0 / np.sqrt((xc * xc).mean(axis=0) + eps)).astype(x.dtype)
    xhat = xc * inv

    def backward(g):
        gg = g * gamma.data
        gx = inv / n * (n * gg - gg.sum(axis=0) - xhat * (gg * xhat).sum(axis=0))
        return gx.astype(x.dtype), (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "batch_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeMismatch(f"global_avg_pool: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    return _result(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),),
                   "global_avg_pool")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit length."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps).astype(x.dtype)
    y = x.data / denom

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        live = norm > eps
        return (np.where(live, (g - y * dot) / denom, g / denom).astype(x.dtype),)

    return _result(y, (x,), backward, "l2_normalize")


def cosine_similarity(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cosine: shapes {a.shape} and {b.shape} differ")
    return row_sum(mul(l2_normalize(a), l2_normalize(b)))


def cosine_distance(a, b) -> Tensor:
    """``1 - <a, b> / (|a| |b|)``; a scalar for vectors, one value per row for matrices."""
    sim = cosine_similarity(a, b)
    return _result(1 - sim.data, (sim,), lambda g: (-g,), "cosine_distance")


# -- optimization --------------------------------------------------------

def sgd_step(params, grads, lr: float):
    """Return ``p - lr * g`` for each pair, leaving the inputs untouched."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeMismatch(f"sgd_step: {len(params)} params but {len(grads)} gradients")
    out = []
    for p, g in zip(params, grads):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ShapeMismatch(f"sgd_step: param {p.shape} vs grad {g.shape}")
        out.append((p - p.dtype.type(lr) * g).astype(p.dtype))
    return out


def sgd_update(params: list[Tensor], lr: float) -> None:
    """In-place SGD over tensors carrying ``.grad``; params without a gradient are skipped."""
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise ShapeMismatch(f"sgd_update: param {p.shape} vs grad {p.grad.shape}")
        p.data -= p.dtype.type(lr) * p.grad.astype(p.dtype)
