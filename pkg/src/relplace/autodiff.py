"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

A dynamic Tape records primitive applications during the forward pass; backward
replays the records in reverse, accumulating adjoints at fan-in. Everything is
64-bit: the certification tolerances downstream are unreachable in 32-bit.

Broadcasting is restricted to leading dimensions: an operand may have a shape
that is a trailing suffix of the other operand's shape (a row vector against a
matrix, a scalar against anything). No size-1 stretching.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateBeacons, NonFiniteValue

_TAPES: list["Tape"] = []


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{op} produced NaN or Inf")
    return arr


class Tensor:
    """A dense float64 array with an optional gradient slot.

    values are stored C-contiguous (row-major); `values` exposes the flat view.
    """

    __slots__ = ("array", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        _check_finite(arr, "tensor construction")
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def values(self) -> np.ndarray:
        return self.array.reshape(-1)

    def item(self) -> float:
        return float(self.array)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; float operands become constant tensors.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return multiply(self, -1.0)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of primitive applications, replayed in reverse by backward."""

    def __init__(self):
        # each record: (output tensor, parent tensors, vjp giving per-parent adjoints)
        self.records: list[tuple[Tensor, tuple[Tensor, ...], callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad tensor reachable from loss.

        Visits each record exactly once, in reverse forward order, accumulating
        adjoints with + at fan-in.
        """
        if loss.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        for out, parents, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in self._produced:
                    pid = id(parent)
                    grads[pid] = grads[pid] + pg if pid in grads else pg
                else:
                    # a leaf: gradients land on .grad directly
                    parent.grad = pg if parent.grad is None else parent.grad + pg


def _register(out_arr: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    _check_finite(out_arr, op)
    arr = np.asarray(out_arr, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        # ascontiguousarray would promote 0-d scalars to 1-d, so guard on ndim
        arr = np.ascontiguousarray(arr)
    out = Tensor.__new__(Tensor)
    out.array = arr
    out.grad = None
    out.requires_grad = False
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = _TAPES[-1]
        tape.records.append((out, parents, vjp))
        tape._produced.add(id(out))
    return out


def _suffix_shape_check(sa: tuple, sb: tuple, op: str) -> None:
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if small != big[len(big) - len(small):]:
        raise ValueError(f"{op}: shape {sa} is not a trailing suffix of {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def add(x, y) -> Tensor:
    x, y = _wrap(x), _wrap(y)
    _suffix_shape_check(x.shape, y.shape, "add")
    return _register(
        x.array + y.array,
        (x, y),
        lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        "add",
    )


def subtract(x, y) -> Tensor:
    x, y = _wrap(x), _wrap(y)
    _suffix_shape_check(x.shape, y.shape, "subtract")
    return _register(
        x.array - y.array,
        (x, y),
        lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        "subtract",
    )


def multiply(x, y) -> Tensor:
    x, y = _wrap(x), _wrap(y)
    _suffix_shape_check(x.shape, y.shape, "multiply")
    xa, ya = x.array, y.array
    return _register(
        xa * ya,
        (x, y),
        lambda g: (_unbroadcast(g * ya, x.shape), _unbroadcast(g * xa, y.shape)),
        "multiply",
    )


def matmul(x, y) -> Tensor:
    x, y = _wrap(x), _wrap(y)
    if x.array.ndim != 2 or y.array.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {x.shape} @ {y.shape}")
    xa, ya = x.array, y.array
    return _register(
        xa @ ya,
        (x, y),
        lambda g: (g @ ya.T, xa.T @ g),
        "matmul",
    )


def matmul_stable(x, y) -> Tensor:
    """Matrix product whose every output row is a fixed-order reduction over
    the row's own entries, independent of batch composition.

    BLAS reorders accumulation depending on matrix shape, so the same row can
    round differently in different batches; the einsum path trades speed for
    batch-invariant, bit-reproducible rows. The adjoint uses the fast path
    (gradients carry no bitwise contract).
    """
    x, y = _wrap(x), _wrap(y)
    if x.array.ndim != 2 or y.array.ndim != 2 or x.shape[1] != y.shape[0]:
        raise ValueError(f"matmul_stable: incompatible shapes {x.shape} @ {y.shape}")
    xa = np.ascontiguousarray(x.array)
    ya = np.ascontiguousarray(y.array)
    return _register(
        np.einsum("ik,kj->ij", xa, ya, optimize=False),
        (x, y),
        lambda g: (g @ ya.T, xa.T @ g),
        "matmul_stable",
    )


def transpose(x, axes: tuple | None = None) -> Tensor:
    x = _wrap(x)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _register(
        np.transpose(x.array, axes),
        (x,),
        lambda g: (np.transpose(g, inv),),
        "transpose",
    )


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    old = x.shape
    return _register(
        x.array.reshape(shape),
        (x,),
        lambda g: (g.reshape(old),),
        "reshape",
    )


def broadcast(x, n: int) -> Tensor:
    """Repeat x along a new leading axis of size n."""
    x = _wrap(x)
    out = np.broadcast_to(x.array, (n,) + x.shape)
    return _register(out, (x,), lambda g: (g.sum(axis=0),), "broadcast")


def repeat_rows(x, n: int) -> Tensor:
    """(K, H) -> (K*n, H) with each row repeated n times consecutively.

    This is broadcast along a new second axis followed by the row-major
    reshape; kept as one primitive because the kernel pairing uses it heavily.
    """
    x = _wrap(x)
    if x.array.ndim != 2:
        raise ValueError("repeat_rows expects a 2-d tensor")
    k, h = x.shape
    return _register(
        np.repeat(x.array, n, axis=0),
        (x,),
        lambda g: (g.reshape(k, n, h).sum(axis=1),),
        "repeat_rows",
    )


def tile_rows(x, n: int) -> Tensor:
    """(K, H) -> (n*K, H) with the whole block tiled n times."""
    x = _wrap(x)
    if x.array.ndim != 2:
        raise ValueError("tile_rows expects a 2-d tensor")
    k, h = x.shape
    return _register(
        np.tile(x.array, (n, 1)),
        (x,),
        lambda g: (g.reshape(n, k, h).sum(axis=0),),
        "tile_rows",
    )


def sum_(x, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    shape = x.shape
    if axis is None:
        vjp = lambda g: (np.broadcast_to(g, shape),)
    else:
        vjp = lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),)
    return _register(x.array.sum(axis=axis), (x,), vjp, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    shape = x.shape
    n = x.array.size if axis is None else shape[axis]
    if axis is None:
        vjp = lambda g: (np.broadcast_to(g, shape) / n,)
    else:
        vjp = lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)
    return _register(x.array.mean(axis=axis), (x,), vjp, "mean")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free on both tails
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x) -> Tensor:
    x = _wrap(x)
    xa = x.array
    return _register(
        np.logaddexp(0.0, xa),
        (x,),
        lambda g: (g * _sigmoid(xa),),
        "softplus",
    )


def relu(x) -> Tensor:
    x = _wrap(x)
    xa = x.array
    return _register(
        np.maximum(xa, 0.0),
        (x,),
        lambda g: (g * (xa > 0.0),),
        "relu",
    )


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a 2-d tensor."""
    x = _wrap(x)
    if x.array.ndim != 2:
        raise ValueError("softmax_rows expects a 2-d tensor")
    z = x.array - x.array.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _register(
        s,
        (x,),
        lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),),
        "softmax_rows",
    )


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(s) for s in np.split(g, splits, axis=axis))

    return _register(
        np.concatenate([p.array for p in parts], axis=axis),
        tuple(parts),
        vjp,
        "concat",
    )


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _wrap(x)
    idx = [slice(None)] * x.array.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _register(x.array[idx], (x,), vjp, "slice")


def gather_rows(x, indices) -> Tensor:
    """Select rows of a 2-d tensor by integer index; adjoint scatter-adds."""
    x = _wrap(x)
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _register(x.array[idx], (x,), vjp, "gather_rows")


def square(x) -> Tensor:
    x = _wrap(x)
    xa = x.array
    return _register(xa * xa, (x,), lambda g: (2.0 * g * xa,), "square")


def sqrt(x) -> Tensor:
    x = _wrap(x)
    if np.any(x.array <= 0.0):
        raise ValueError("sqrt requires strictly positive entries")
    root = np.sqrt(x.array)
    return _register(root, (x,), lambda g: (g / (2.0 * root),), "sqrt")


def _adjugate3(a: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1],
             a[0, 2] * a[2, 1] - a[0, 1] * a[2, 2],
             a[0, 1] * a[1, 2] - a[0, 2] * a[1, 1]],
            [a[1, 2] * a[2, 0] - a[1, 0] * a[2, 2],
             a[0, 0] * a[2, 2] - a[0, 2] * a[2, 0],
             a[0, 2] * a[1, 0] - a[0, 0] * a[1, 2]],
            [a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0],
             a[0, 1] * a[2, 0] - a[0, 0] * a[2, 1],
             a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]],
        ]
    )


def matrix_inverse(x) -> Tensor:
    """Inverse of a well-conditioned 3x3 matrix via the explicit adjugate.

    An ill-conditioned input here means the multilateration beacon geometry
    is degenerate, so that is the error raised.
    """
    x = _wrap(x)
    a = x.array
    if a.shape != (3, 3):
        raise ValueError(f"matrix_inverse expects 3x3, got {a.shape}")
    if np.linalg.cond(a) >= 1e12:
        raise DegenerateBeacons("3x3 inverse of a (near-)singular matrix")
    adj = _adjugate3(a)
    det = a[0, 0] * adj[0, 0] + a[0, 1] * adj[1, 0] + a[0, 2] * adj[2, 0]
    inv = adj / det
    return _register(
        inv,
        (x,),
        lambda g: (-inv.T @ g @ inv.T,),
        "matrix_inverse",
    )


def divide(x, s) -> Tensor:
    """Divide a tensor elementwise by a scalar (python float or scalar tensor)."""
    x, s = _wrap(x), _wrap(s)
    if s.array.size != 1:
        raise ValueError(f"divide expects a scalar divisor, got shape {s.shape}")
    xa, sa = x.array, float(s.array)

    def vjp(g):
        return (g / sa, np.sum(g * xa) * (-1.0 / (sa * sa)) * np.ones(s.shape))

    return _register(xa / sa, (x, s), vjp, "divide")


def gradient_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Compare tape gradients of a scalar function against central differences.

    Args:
        f: callable mapping a Tensor to a scalar Tensor.
        x: evaluation point; perturbed in place and restored.
        h: central difference step.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        y = f(x)
    tape.backward(y)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()

    flat = x.array.reshape(-1)
    numeric = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x).array)
        flat[i] = orig - h
        lo = float(f(x).array)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float(np.max(np.abs(analytic.reshape(-1) - numeric) / denom))
