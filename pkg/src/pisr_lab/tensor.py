"""Dense tensors with reverse-mode differentiation.

Every op builds a node holding its output data, its parent tensors and a
closure mapping the output cotangent to parent cotangents. ``backward``
replays the recorded graph in reverse topological order.

Only the handful of ops the segmentation pipeline needs are provided.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 4

_check_finite = False


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op '{op}'")
        self.op = op


@contextlib.contextmanager
def detect_anomaly():
    """Raise NonFiniteError naming the op as soon as any op yields NaN/Inf."""
    global _check_finite
    prev = _check_finite
    _check_finite = True
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        """Create the output of an op.

        ``backward(g)`` must return one cotangent (or None) per parent.
        """
        if _check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteError(op)
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        out.op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward without seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``params`` (zeros where unused)."""
    params = list(params)
    for p in params:
        p.grad = None
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "add")
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "sub")
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _broadcast_shape(a, b, "mul")
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def sqrt(a: Tensor) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    out = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1), 0)
        return (g * d,)

    return Tensor.from_op(out, (a,), back, "sqrt")


def rms_normalize_rows(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Each row of a 2-D tensor divided by sqrt(mean(row**2) + eps); all-zero rows stay zero."""
    if a.data.ndim != 2:
        raise ShapeError(f"rms_normalize_rows expects a matrix, got {a.shape}")
    x = a.data
    n = x.shape[1]
    r = np.sqrt((x * x).mean(axis=1, keepdims=True) + x.dtype.type(eps))

    def back(g):
        return (g / r - x * ((g * x).sum(axis=1, keepdims=True) / (n * r ** 3)),)

    return Tensor.from_op((x / r).astype(a.dtype), (a,), back, "rms_normalize_rows")


def absolute(a: Tensor) -> Tensor:
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got {a.shape}")
    return Tensor.from_op(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    parts = [as_tensor(p) for p in parts]
    tail = parts[0].shape[1:]
    for p in parts[1:]:
        if p.shape[1:] != tail:
            raise ShapeError(f"concat_rows: trailing shapes {parts[0].shape} and {p.shape} differ")
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return Tensor.from_op(np.concatenate([p.data for p in parts], axis=0), parts, back, "concat_rows")


def take_rows(a: Tensor, rows: Sequence[int]) -> Tensor:
    idx = np.asarray(rows, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor.from_op(a.data[idx], (a,), back, "take_rows")


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out, dtype=a.dtype), (a,), back, "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return Tensor.from_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _im2col3(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, h, w), dtype=x.dtype)
    for t in range(9):
        di, dj = divmod(t, 3)
        cols[:, t] = xp[:, di:di + h, dj:dj + w]
    return cols.reshape(c * 9, h * w)


def _col2im3(cols: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    c, h, w = shape
    cols = cols.reshape(c, 9, h, w)
    xp = np.zeros((c, h + 2, w + 2), dtype=cols.dtype)
    for t in range(9):
        di, dj = divmod(t, 3)
        xp[:, di:di + h, dj:dj + w] += cols[:, t]
    return xp[:, 1:-1, 1:-1]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padded 2-D cross-correlation of a C_in x H x W map.

    Only 1x1 and 3x3 kernels are supported; 3x3 uses one pixel of zero padding.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv2d: unsupported kernel size {kh}x{kw}")
    _, h, w = x.shape
    cols = x.data.reshape(cin, h * w) if kh == 1 else _im2col3(x.data)
    wmat = kernel.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
        out = out + bias.data[:, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        g = g.reshape(cout, h * w)
        gk = (g @ cols.T).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            gcols = wmat.T @ g
            gx = gcols.reshape(x.shape) if kh == 1 else _col2im3(gcols, x.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=1)

    return Tensor.from_op(out.reshape(cout, h, w), parents, back, "conv2d")


# ---------------------------------------------------------------- probabilities


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (a,), back, "softmax")


def log_softmax_np(x: np.ndarray, axis: int = 0) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean cross-entropy of N x P logits (class axis first) against P integer labels."""
    n = logits.shape[0]
    flat = logits.data.reshape(n, -1)
    target = np.asarray(target).reshape(-1).astype(np.intp)
    if target.shape[0] != flat.shape[1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    valid = np.ones_like(target, dtype=bool) if ignore_index is None else target != ignore_index
    count = max(int(valid.sum()), 1)
    safe = np.where(valid, target, 0)
    logp = log_softmax_np(flat, axis=0)
    cols = np.arange(flat.shape[1])
    nll = -logp[safe, cols] * valid
    out = np.asarray(nll.sum() / count, dtype=logits.dtype)

    def back(g):
        p = np.exp(logp)
        p[safe, cols] -= 1.0
        p *= valid / count
        return ((g * p).reshape(logits.shape),)

    return Tensor.from_op(out, (logits,), back, "cross_entropy")


def mse(a: Tensor, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=a.dtype)
    if t.shape != a.shape:
        raise ShapeError(f"mse: {a.shape} vs {t.shape}")
    d = a.data - t
    n = d.size
    return Tensor.from_op(np.asarray((d * d).sum() / n, dtype=a.dtype), (a,), lambda g: (g * 2.0 * d / n,), "mse")


def l1(a: Tensor, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error, averaged over the entries selected by ``mask``.

    ``mask`` broadcasts against ``a``; an empty mask yields 0.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=a.dtype)
    if t.shape != a.shape:
        raise ShapeError(f"l1: {a.shape} vs {t.shape}")
    m = np.ones(a.shape, dtype=a.dtype) if mask is None else np.broadcast_to(mask, a.shape).astype(a.dtype)
    n = max(float(m.sum()), 1.0)
    d = a.data - t
    out = np.asarray((np.abs(d) * m).sum() / n, dtype=a.dtype)
    return Tensor.from_op(out, (a,), lambda g: (g * np.sign(d) * m / n,), "l1")


def cast(a: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    src = a.dtype
    return Tensor.from_op(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "cast")
