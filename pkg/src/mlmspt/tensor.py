"""Small dense-tensor library with tape-based reverse-mode autodiff.

Every tensor is at most rank 2 (model code works per cloud on N x D
matrices). Each differentiable op is a :class:`Function` subclass with a
``forward`` and a ``backward`` static method; the backward rule is looked up
on the class at backward time, so a rule can be swapped out in tests.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


DTYPES = {"f32": np.float32, "f64": np.float64}


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_fn", "_ctx", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._fn = None
        self._ctx = None
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Function:
    """Base for differentiable ops; subclasses define forward/backward."""

    @staticmethod
    def forward(ctx: dict, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        ctx: dict = {}
        out = Tensor(cls.forward(ctx, *(t.data for t in inputs), **kwargs))
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._fn = cls
            out._ctx = ctx
            out._parents = inputs
        return out


def _check_matrix(name: str, *arrs: np.ndarray) -> None:
    for a in arrs:
        if a.ndim != 2:
            raise ShapeError(f"{name} expects matrices, got shape {a.shape}")


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _check_matrix("matmul", a, b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        return grad @ ctx["b"].T, ctx["a"].T @ grad


class Add(Function):
    """Elementwise add; a 1 x C right operand broadcasts over rows."""

    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape and not (b.ndim == 2 and b.shape[0] == 1 and a.ndim == 2 and a.shape[1] == b.shape[1]):
            raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
        ctx["bcast"] = a.shape != b.shape
        return a + b

    @staticmethod
    def backward(ctx, grad):
        gb = grad.sum(axis=0, keepdims=True) if ctx["bcast"] else grad
        return grad, gb


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul shapes differ: {a.shape} * {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx["b"], grad * ctx["a"]


class Scale(Function):
    @staticmethod
    def forward(ctx, a, c):
        ctx["c"] = c
        return a * a.dtype.type(c)

    @staticmethod
    def backward(ctx, grad):
        return (grad * grad.dtype.type(ctx["c"]),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a):
        _check_matrix("transpose", a)
        return np.ascontiguousarray(a.T)

    @staticmethod
    def backward(ctx, grad):
        return (grad.T,)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        mask = a > 0
        ctx["mask"] = mask
        return np.where(mask, a, a.dtype.type(0))

    @staticmethod
    def backward(ctx, grad):
        return (np.where(ctx["mask"], grad, grad.dtype.type(0)),)


class SoftmaxRows(Function):
    @staticmethod
    def forward(ctx, x):
        _check_matrix("softmax_rows", x)
        if np.isnan(x).any():
            raise NumericError("softmax_rows received NaN input")
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        y = ctx["y"]
        return (y * (grad - (grad * y).sum(axis=1, keepdims=True)),)


class Concat(Function):
    """Concatenate matrices along the feature (column) axis."""

    @staticmethod
    def forward(ctx, *arrs):
        _check_matrix("concat", *arrs)
        rows = {a.shape[0] for a in arrs}
        if len(rows) != 1:
            raise ShapeError(f"concat row counts differ: {[a.shape for a in arrs]}")
        ctx["widths"] = [a.shape[1] for a in arrs]
        return np.concatenate(arrs, axis=1)

    @staticmethod
    def backward(ctx, grad):
        bounds = np.cumsum([0] + ctx["widths"])
        return tuple(grad[:, bounds[i]:bounds[i + 1]] for i in range(len(ctx["widths"])))


class SliceCols(Function):
    @staticmethod
    def forward(ctx, a, start, stop):
        _check_matrix("slice_cols", a)
        if not 0 <= start <= stop <= a.shape[1]:
            raise ShapeError(f"column slice [{start}:{stop}] out of range for {a.shape}")
        ctx["shape"], ctx["start"], ctx["stop"] = a.shape, start, stop
        return a[:, start:stop].copy()

    @staticmethod
    def backward(ctx, grad):
        g = np.zeros(ctx["shape"], dtype=grad.dtype)
        g[:, ctx["start"]:ctx["stop"]] = grad
        return (g,)


class RepeatRows(Function):
    """Tile a 1 x C row into n x C."""

    @staticmethod
    def forward(ctx, a, n):
        if a.ndim != 2 or a.shape[0] != 1:
            raise ShapeError(f"repeat_rows expects a 1 x C row, got {a.shape}")
        return np.repeat(a, n, axis=0)

    @staticmethod
    def backward(ctx, grad):
        return (grad.sum(axis=0, keepdims=True),)


class MaxRows(Function):
    """Column-wise max over rows (global max-pool); ties route to the first row."""

    @staticmethod
    def forward(ctx, a):
        _check_matrix("max_rows", a)
        idx = a.argmax(axis=0)
        ctx["idx"], ctx["shape"] = idx, a.shape
        return a[idx, np.arange(a.shape[1])][None, :]

    @staticmethod
    def backward(ctx, grad):
        g = np.zeros(ctx["shape"], dtype=grad.dtype)
        g[ctx["idx"], np.arange(ctx["shape"][1])] = grad[0]
        return (g,)


class MeanRows(Function):
    @staticmethod
    def forward(ctx, a):
        _check_matrix("mean_rows", a)
        ctx["n"] = a.shape[0]
        return a.mean(axis=0, keepdims=True)

    @staticmethod
    def backward(ctx, grad):
        return (np.repeat(grad / grad.dtype.type(ctx["n"]), ctx["n"], axis=0),)


class Sum(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["shape"] = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    @staticmethod
    def backward(ctx, grad):
        return (np.full(ctx["shape"], grad, dtype=grad.dtype),)


class Mean(Function):
    @staticmethod
    def forward(ctx, a):
        ctx["shape"] = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    @staticmethod
    def backward(ctx, grad):
        return (np.full(ctx["shape"], grad / grad.dtype.type(np.prod(ctx["shape"])), dtype=grad.dtype),)


class CrossEntropy(Function):
    """Mean softmax cross-entropy of the rows of ``logits`` against integer targets."""

    @staticmethod
    def forward(ctx, logits, targets):
        _check_matrix("cross_entropy", logits)
        n, k = logits.shape
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        if targets.shape[0] != n:
            raise ShapeError(f"cross_entropy: {n} rows of logits but {targets.shape[0]} targets")
        if n and (targets.min() < 0 or targets.max() >= k):
            raise ContractError(f"cross_entropy: target label outside [0, {k})")
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        picked = z[np.arange(n), targets]
        ctx["p"] = np.exp(z - lse[:, None])
        ctx["t"] = targets
        return np.asarray((lse - picked).mean(), dtype=logits.dtype)

    @staticmethod
    def backward(ctx, grad):
        g = ctx["p"].copy()
        n = g.shape[0]
        g[np.arange(n), ctx["t"]] -= 1
        return (g * (grad / g.dtype.type(n)),)


def matmul(a, b) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def scale(a, c: float) -> Tensor:
    return Scale.apply(as_tensor(a), c=float(c))


def transpose(a) -> Tensor:
    return Transpose.apply(as_tensor(a))


def relu(a) -> Tensor:
    return Relu.apply(as_tensor(a))


def softmax_rows(x) -> Tensor:
    """Row-wise softmax with max-subtraction."""
    return SoftmaxRows.apply(as_tensor(x))


def concat(tensors) -> Tensor:
    return Concat.apply(*(as_tensor(t) for t in tensors))


def slice_cols(a, start: int, stop: int) -> Tensor:
    return SliceCols.apply(as_tensor(a), start=start, stop=stop)


def repeat_rows(a, n: int) -> Tensor:
    return RepeatRows.apply(as_tensor(a), n=n)


def max_rows(a) -> Tensor:
    return MaxRows.apply(as_tensor(a))


def mean_rows(a) -> Tensor:
    return MeanRows.apply(as_tensor(a))


def sum_all(a) -> Tensor:
    return Sum.apply(as_tensor(a))


def mean_all(a) -> Tensor:
    return Mean.apply(as_tensor(a))


def cross_entropy(logits, targets) -> Tensor:
    """Softmax cross-entropy; a single K-vector of logits takes a scalar target."""
    logits = as_tensor(logits)
    if logits.data.ndim == 1:
        logits = _Reshape.apply(logits, shape=(1, -1))
    return CrossEntropy.apply(logits, targets=np.atleast_1d(targets))


class _Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx["shape"] = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, grad):
        return (grad.reshape(ctx["shape"]),)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._fn.backward(node._ctx, g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
