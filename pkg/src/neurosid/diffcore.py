"""Dense float64 tensors with reverse-mode differentiation and AdamW.

Every model in the package is expressed through :class:`Tensor`.  A forward
pass records a graph of operations; :func:`backward` walks it in reverse
topological order and fills ``.grad`` on the leaves that require it.

Recording can be switched off per thread with :func:`no_grad`, which makes
long open-loop rollouts cheap.
"""
from __future__ import annotations

import contextlib
import contextvars
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor", "ParameterStore", "ShapeError", "NumericDomainError", "NumericError",
    "GradientError", "tensor", "parameter", "concat", "stack", "matmul", "backward",
    "grad", "no_grad", "is_grad_enabled", "adamw_step", "clip_grad_norm",
    "save_checkpoint", "load_checkpoint", "checkpoint_dict",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericDomainError(ArithmeticError):
    """An operand lies outside the domain of the operation (log, sqrt, ...)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class GradientError(ValueError):
    """backward() called on something that is not a recorded scalar."""


_GRAD_ENABLED = contextvars.ContextVar("neurosid_grad_enabled", default=True)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@contextlib.contextmanager
def no_grad():
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray.  ``_backward`` maps the output
    gradient to a tuple of parent gradients (``None`` for parents that do not
    need one).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- binary arithmetic ------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        try:
            data = self.data + other.data
        except ValueError as exc:
            raise ShapeError(f"add: {self.shape} vs {other.shape}") from exc
        sa, sb = self.shape, other.shape
        return Tensor._make(data, (self, other),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        try:
            data = self.data - other.data
        except ValueError as exc:
            raise ShapeError(f"subtract: {self.shape} vs {other.shape}") from exc
        sa, sb = self.shape, other.shape
        return Tensor._make(data, (self, other),
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        try:
            data = self.data * other.data
        except ValueError as exc:
            raise ShapeError(f"multiply: {self.shape} vs {other.shape}") from exc
        a, b = self.data, other.data
        return Tensor._make(data, (self, other),
                            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        if np.any(other.data == 0):
            raise NumericDomainError("division by zero")
        try:
            data = self.data / other.data
        except ValueError as exc:
            raise ShapeError(f"divide: {self.shape} vs {other.shape}") from exc
        a, b = self.data, other.data
        return Tensor._make(
            data, (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)))

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        data = self.data[index]
        shape = self.shape
        fancy = isinstance(index, (list, np.ndarray)) or (
            isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index))

        def _bw(g):
            out = np.zeros(shape)
            if fancy:
                np.add.at(out, index, g)
            else:
                out[index] = g
            return (out,)

        return Tensor._make(data, (self,), _bw)

    # -- elementwise ----------------------------------------------------------

    def scale(self, c: float) -> "Tensor":
        return Tensor._make(self.data * c, (self,), lambda g: (g * c,))

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._make(x * x, (self,), lambda g: (2.0 * x * g,))

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0):
            raise NumericDomainError("sqrt of negative value")
        y = np.sqrt(self.data)
        if np.any(y == 0) and self.requires_grad and _GRAD_ENABLED.get():
            raise NumericDomainError("sqrt gradient undefined at 0")
        return Tensor._make(y, (self,), lambda g: (0.5 * g / y,))

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        x = self.data
        if np.any(x <= 0):
            raise NumericDomainError("log of non-positive value")
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return Tensor._make(y, (self,), lambda g: (g * y * (1.0 - y),))

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),))

    def erf(self) -> "Tensor":
        """tanh-based approximation of erf (the one implied by tanh-GELU)."""
        c = 2.0 / math.sqrt(math.pi)
        x = self
        return (x + x.square() * x * 0.08943).scale(c).tanh()

    def relu(self) -> "Tensor":
        return self.maximum(0.0)

    def maximum(self, c: float) -> "Tensor":
        x = self.data
        mask = x > c
        return Tensor._make(np.where(mask, x, c), (self,), lambda g: (g * mask,))

    def clip(self, lo: float | None = None, hi: float | None = None) -> "Tensor":
        x = self.data
        y = np.clip(x, lo, hi)
        mask = np.ones_like(x, dtype=bool)
        if lo is not None:
            mask &= x >= lo
        if hi is not None:
            mask &= x <= hi
        return Tensor._make(y, (self,), lambda g: (g * mask,))

    def abs(self) -> "Tensor":
        # subgradient 0 at exactly 0
        s = np.sign(self.data)
        return Tensor._make(np.abs(self.data), (self,), lambda g: (g * s,))

    # -- reductions and shape ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(data, dtype=np.float64), (self,), _bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape {old} -> {shape}") from exc
        return Tensor._make(data, (self,), lambda g: (g.reshape(old),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def transpose(self) -> "Tensor":
        return Tensor._make(self.data.T, (self,), lambda g: (g.T,))

    def softmax(self, axis: int = -1) -> "Tensor":
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)

        def _bw(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return Tensor._make(y, (self,), _bw)

    def backward(self) -> None:
        backward(self)


def tensor(data) -> Tensor:
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` a vector or matrix; ``a`` may carry leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim > 2 or a.ndim == 0:
        raise ShapeError("matmul supports (..., n) @ (n,) or (..., n) @ (n, m)")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    data = A @ B

    def _bw(g):
        if B.ndim == 1:
            ga = np.multiply.outer(g, B)
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1) if A.ndim > 1 else g * A
        elif A.ndim == 1:
            ga = B @ g
            gb = np.outer(A, g)
        else:
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return Tensor._make(data, (a, b), _bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat: incompatible shapes") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(data, tuple(tensors), _bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("stack: incompatible shapes") from exc

    def _bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(data, tuple(tensors), _bw)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(output: Tensor, store: "ParameterStore | None" = None) -> dict[str, np.ndarray] | None:
    """Reverse-mode sweep from a scalar ``output``.

    Sets ``.grad`` on every leaf reached.  With a ``store``, every parameter in
    it gets a gradient (zeros when it did not take part) and a name-keyed dict
    of those gradients is returned.
    """
    if output.size != 1:
        raise GradientError(f"backward needs a scalar output, got shape {output.shape}")
    if store is not None:
        for p in store.params.values():
            p.grad = np.zeros_like(p.data)
    if not output.requires_grad:
        return store.grads() if store is not None else None
    grads = {id(output): np.ones_like(output.data)}
    for node in reversed(_topo_order(output)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return store.grads() if store is not None else None


def grad(output: Tensor, store: "ParameterStore") -> dict[str, np.ndarray]:
    return backward(output, store)


@dataclass
class ParameterStore:
    """Named parameters plus AdamW moment estimates."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value.requires_grad = True
        value.name = name
        self.params[name] = value
        self.m[name] = np.zeros_like(value.data)
        self.v[name] = np.zeros_like(value.data)
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in self.params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def assign(self, values: dict[str, np.ndarray]) -> None:
        for k, arr in values.items():
            p = self.params[k]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale ``grads`` to global norm ``max_norm``; returns (grads, original norm)."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        s = max_norm / total
        grads = {k: g * s for k, g in grads.items()}
    return grads, total


def adamw_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float = 2e-3,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> ParameterStore:
    """One AdamW update, in place.  Decay acts on the parameter directly."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r}; step rejected")
    if lr < 0 or eps <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or weight_decay < 0:
        raise ValueError("invalid AdamW hyperparameters")
    store.t += 1
    t = store.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in store.params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        m = store.m[k] = beta1 * store.m[k] + (1.0 - beta1) * g
        v = store.v[k] = beta2 * store.v[k] + (1.0 - beta2) * g * g
        theta = p.data * (1.0 - lr * weight_decay) if weight_decay else p.data
        p.data = theta - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return store


def checkpoint_dict(store: ParameterStore) -> dict:
    return {k: {"shape": list(store.params[k].shape),
                "values": store.params[k].data.ravel().tolist()}
            for k in sorted(store.params)}


def save_checkpoint(store: ParameterStore, path) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(store), fh, sort_keys=True)


def load_checkpoint(store: ParameterStore, source) -> None:
    """Load weights from a path or an already-parsed checkpoint dict."""
    if not isinstance(source, dict):
        with open(source) as fh:
            source = json.load(fh)
    store.assign({k: np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
                  for k, rec in source.items()})
