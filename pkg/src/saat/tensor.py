"""Minimal reverse-mode differentiation on top of numpy.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` replays them in exact reverse order. Outside a tape every
operation is a plain numpy computation and nothing is retained.
"""

import threading
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_local = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tape:
    """Ordered record of differentiable operations.

    Tapes are thread-local: a tape entered on one thread is invisible to
    others, so independent tapes can run concurrently.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, fn: "Function", out: "Tensor") -> None:
        self.entries.append((fn, out))

    def clear(self) -> None:
        for fn, out in self.entries:
            fn.release()
            out._fn = None
        self.entries = []

    def backward(self, root: "Tensor", grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if root.data.size != 1:
                raise ValueError("backward without an explicit grad needs a scalar root")
            grad = np.ones_like(root.data)
        grad = np.asarray(grad, dtype=root.data.dtype)
        if grad.shape != root.data.shape:
            raise ValueError(f"grad shape {grad.shape} != root shape {root.data.shape}")
        if root._fn is None:
            root._accumulate(grad)
            return
        pending = {id(root): grad}
        for fn, out in reversed(self.entries):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn.backward(g)
            for inp, ig in zip(fn.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                _check_finite(ig, f"{type(fn).__name__}.backward")
                if inp._fn is None:
                    inp._accumulate(ig)
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + ig
                else:
                    pending[id(inp)] = ig


class Tensor:
    """Dense n-d array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._fn: Optional[Function] = None
        self._tape: Optional[Tape] = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor {self.data.shape}")
        self.grad = g.copy() if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if self._tape is None:
            if self.requires_grad:
                Tape().backward(self, grad)
                return
            raise RuntimeError("tensor was not produced on a tape")
        self._tape.backward(self, grad)

    # arithmetic
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Mul.apply(self, _lift(-1.0, self))

    def __pow__(self, p: float):
        return Pow.apply(self, p=float(p))

    def __matmul__(self, other):
        return MatMul.apply(self, _lift(other, self))

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.data.shape[a] for a in _axes(axis)]))
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def swapaxes(self, a: int, b: int):
        return SwapAxes.apply(self, a=a, b=b)

    def exp(self):
        return Exp.apply(self)


def _axes(axis):
    return (axis,) if isinstance(axis, int) else tuple(axis)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Function:
    """Base class for recorded operations.

    ``forward`` receives raw arrays and returns an array; ``backward`` maps the
    output gradient to a tuple with one entry (or None) per input.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    def release(self) -> None:
        self.__dict__ = {"inputs": ()}

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out_data = fn.forward(*(t.data for t in inputs), **kwargs)
        _check_finite(out_data, f"{cls.__name__}.forward")
        out = Tensor(out_data)
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._fn = fn
            out._tape = tape
            tape.record(fn, out)
        return out


def unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = unbroadcast(g / self.b, self.a.shape)
        gb = unbroadcast(-g * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class Pow(Function):
    def forward(self, a, p):
        self.a, self.p = a, p
        return a ** p

    def backward(self, g):
        return (g * self.p * self.a ** (self.p - 1),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class MatMul(Function):
    """Batched matrix product with numpy broadcasting over leading axes.

    1-D operands are promoted as numpy does (row vector on the left, column
    vector on the right).
    """

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        self.a = a[None, :] if a.ndim == 1 else a
        self.b = b[:, None] if b.ndim == 1 else b
        out = self.a @ self.b
        self.promoted = out.shape
        return a @ b

    def backward(self, g):
        g = g.reshape(self.promoted)
        ga = g @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ g
        return (unbroadcast(ga, self.a.shape).reshape(self.shapes[0]),
                unbroadcast(gb, self.b.shape).reshape(self.shapes[1]))


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, tuple(a % len(self.shape) for a in _axes(self.axis)))
        return (np.broadcast_to(g, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class SwapAxes(Function):
    def forward(self, x, a, b):
        self.ab = (a, b)
        return np.swapaxes(x, a, b)

    def backward(self, g):
        return (np.swapaxes(g, *self.ab),)


class TakeRows(Function):
    """Select entries along axis -2 (rows of a trailing matrix)."""

    def forward(self, x, idx=None):
        self.idx, self.shape = np.asarray(idx), x.shape
        return x[..., self.idx, :]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=g.dtype)
        np.add.at(out, (Ellipsis, self.idx, slice(None)), g)
        return (out,)


def no_grad_value(fn: Callable[..., Tensor], *args, **kwargs) -> np.ndarray:
    """Evaluate ``fn`` without recording and return the raw array."""
    return fn(*args, **kwargs).data


def value_and_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> Tuple[float, np.ndarray]:
    """Return ``f(x)`` and its gradient w.r.t. ``x`` for scalar-valued ``f``."""
    xt = Tensor(np.array(x, copy=True), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if y.size != 1:
        raise ValueError("value_and_grad needs a scalar-valued function")
    if y._fn is None:
        return y.item(), np.zeros_like(xt.data)
    tape.backward(y)
    g = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
    return y.item(), g


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64, copy=True)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x.copy())).item()
        flat[i] = orig - h
        fm = f(Tensor(x.copy())).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    _check_finite(out, "numerical_grad")
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: ArrayLike, h: float = 1e-5) -> float:
    """Max elementwise relative error between analytic and central-difference gradients.

    The error at each element is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "grad_check input")
    _, analytic = value_and_grad(f, x)
    numeric = numerical_grad(f, x, h)
    _check_finite(analytic, "grad_check analytic gradient")
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
