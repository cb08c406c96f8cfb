"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Just enough machinery for the encoders, the fusion/patch networks, and the
contrastive loss: broadcasting elementwise ops, (batched) matmul, reductions,
gather/concat, and a 3x3 same-padding convolution. Gradients are exact chain
rules, so finite-difference checks are meaningful at double precision.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` over axes that were broadcast to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the computation graph; holds a float64 array and its adjoint."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Backpropagate from this node. Scalar outputs default to seed 1."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar output")
            seed = np.ones_like(self.data)
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name="") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward=backward)
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def powc(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    out_data = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(out_data, (a,), backward)


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, alpha * a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.where(mask, 1.0, alpha))

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product: both 2-d, or stacked with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
            raise ValueError(
                f"matmul supports 2-d or equal-batch operands, got "
                f"{a.data.shape} @ {b.data.shape}"
            )
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out_data, (a, b), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; the gradient routes to the first argmax (ties)."""
    a = as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    idx = np.argmax(a.data, axis=axis)

    def backward(g):
        if not a.requires_grad:
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gg, axis=axis)
        a._accumulate(ga)

    return _make(out_data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)

    def backward(g):
        if a.requires_grad:
            inv = None if axes is None else np.argsort(axes)
            a._accumulate(np.transpose(g, inv))

    return _make(out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out_data, tuple(tensors), backward)


def take_rows(a, idx) -> Tensor:
    """Gather rows along axis 0 (indices may repeat)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a._accumulate(ga)

    return _make(out_data, (a,), backward)


def gather_pairs(a, rows, cols) -> Tensor:
    """Gather elements a[rows[i], cols[i]] of a 2-d tensor into a vector."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out_data = a.data[rows, cols]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, cols), g)
            a._accumulate(ga)

    return _make(out_data, (a,), backward)


def conv2d_3x3(x, w, b) -> Tensor:
    """3x3 convolution, stride 1, zero same-padding.

    x: (B, H, W, Cin), w: (3, 3, Cin, Cout), b: (Cout,). Returns (B, H, W, Cout).
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    B, H, W, cin = x.data.shape
    kh, kw, cin_w, cout = w.data.shape
    if (kh, kw) != (3, 3) or cin_w != cin:
        raise ValueError(f"bad conv shapes: x {x.data.shape}, w {w.data.shape}")
    xp = np.zeros((B, H + 2, W + 2, cin), dtype=np.float64)
    xp[:, 1:-1, 1:-1, :] = x.data
    cols = np.empty((B, H, W, 9, cin), dtype=np.float64)
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, i:i + H, j:j + W, :]
    cols2 = cols.reshape(B * H * W, 9 * cin)
    wmat = w.data.reshape(9 * cin, cout)
    out_data = (cols2 @ wmat + b.data).reshape(B, H, W, cout)

    def backward(g):
        g2 = g.reshape(B * H * W, cout)
        if w.requires_grad:
            w._accumulate((cols2.T @ g2).reshape(3, 3, cin, cout))
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, H, W, 9, cin)
            gxp = np.zeros_like(xp)
            for k in range(9):
                i, j = divmod(k, 3)
                gxp[:, i:i + H, j:j + W, :] += gcols[:, :, :, k, :]
            x._accumulate(gxp[:, 1:-1, 1:-1, :])

    return _make(out_data, (x, w, b), backward)


def softmax(a, axis=-1) -> Tensor:
    """Softmax along `axis`; shift by the (detached) max for stability."""
    a = as_tensor(a)
    shifted = sub(a, a.data.max(axis=axis, keepdims=True))
    e = exp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


def masked_softmax(logits, mask, axis=-1) -> Tensor:
    """Softmax restricted to entries where mask == 1.

    Rows must have at least one unmasked entry. `mask` is a constant array;
    masked entries receive exactly zero weight and zero gradient.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=np.float64)
    sink = (mask - 1.0) * 1e30
    return softmax(add(mul(logits, mask), sink), axis=axis)


def l2_normalize_rows(a, eps_check: float = 1e-12) -> Tensor:
    """Scale each row of a 2-d tensor to unit norm; zero rows are an error."""
    a = as_tensor(a)
    sq = tsum(mul(a, a), axis=1, keepdims=True)
    if np.any(sq.data < eps_check * eps_check):
        raise ValueError("zero-norm row passed to l2_normalize_rows")
    return div(a, sqrt(sq))


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with learned gain and shift."""
    mu = tmean(a, axis=-1, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(1.0, sqrt(add(var, eps)))
    return add(mul(mul(centered, inv), gamma), beta)


def pairwise_cosine_distance(a, b) -> Tensor:
    """Matrix of [0,1]-normalized cosine distances between rows of a and b."""
    an = l2_normalize_rows(a)
    bn = l2_normalize_rows(b)
    cos = matmul(an, transpose(bn))
    return mul(sub(1.0, cos), 0.5)
