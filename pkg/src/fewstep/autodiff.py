"""Float64 tensors with tape-based reverse-mode differentiation and AdamW.

Every op records its parents and a vector-Jacobian closure while grad mode is
on. ``backward`` walks the recorded graph once in reverse topological order.
The graph is rebuilt on every forward pass; nothing is cached between steps.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamSet",
    "AdamW",
    "ShapeError",
    "NonFiniteError",
    "GradientError",
    "no_grad",
    "grad_enabled",
    "tensor",
    "matmul",
    "lmatmul",
    "tanh",
    "silu",
    "sin",
    "cos",
    "square",
    "mse",
    "concat",
    "stack",
    "take_rows",
    "backward",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GradientError(RuntimeError):
    """Backward called on something that cannot be differentiated."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's reflected ops

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _as_array(data)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operators -----------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._vjp = vjp if track else None
    return out


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    out = ad * bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NonFiniteError("division by zero")
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
        "div",
    )


def square(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def silu(a) -> Tensor:
    a = _lift(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free logistic
    return _make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def sin(a) -> Tensor:
    a = _lift(a)
    x = a.data
    return _make(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin")


def cos(a) -> Tensor:
    a = _lift(a)
    x = a.data
    return _make(np.cos(x), (a,), lambda g: (-g * np.sin(x),), "cos")


# linear algebra and reductions ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim != 2:
        raise ShapeError(f"matmul expects (..., n, k) @ (k, m), got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    def vjp(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), vjp, "matmul")


def lmatmul(m: np.ndarray, a) -> Tensor:
    """Constant ``m`` (n, k) applied on the left of ``a`` (..., k, h)."""
    a = _lift(a)
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or a.ndim < 2 or m.shape[1] != a.shape[-2]:
        raise ShapeError(f"lmatmul expects (n, k) @ (..., k, h), got {m.shape} @ {a.shape}")
    return _make(m @ a.data, (a,), lambda g: (m.T @ g,), "lmatmul")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def mse(pred, target) -> Tensor:
    """Mean over all elements of (pred - target)**2."""
    pred, target = _lift(pred), _lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse operands differ: {pred.shape} vs {target.shape}")
    return tmean(square(pred - target))


# shape manipulation ---------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = _lift(a)
    shape = a.shape
    out = np.array(a.data[idx])

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), vjp, "getitem")


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: rows of a 2-D ``table`` selected by integer ``ids``."""
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("take_rows needs a 2-D table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"row id out of range [0, {table.shape[0]})")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), vjp, "take_rows")


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(f"concat shapes do not conform: {[q.shape for q in parts]}")
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _make(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=ax)), "concat")


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis=axis)


# backward -------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor, params: "ParamSet | Iterable[Tensor] | None" = None) -> None:
    """Differentiate scalar ``loss`` and write gradients into ``params``.

    Leaves that require grad but are not reached get a zero gradient. With
    ``params=None`` every reachable leaf receives its gradient.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    leaves = list(params.values()) if isinstance(params, ParamSet) else (
        list(params) if params is not None else None
    )
    if not loss.requires_grad:
        if leaves and any(p.requires_grad for p in leaves):
            raise GradientError("loss is not reachable from any parameter")
        raise GradientError("loss does not depend on anything that requires grad")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    order = _toposort(loss)
    reached: dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            reached[id(node)] = g
            if leaves is None:
                node.grad = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    if leaves is not None:
        for p in leaves:
            g = reached.get(id(p))
            p.grad = np.zeros_like(p.data) if g is None else g
            _check_finite(p.grad, "backward")


# parameters and optimizer ---------------------------------------------------


class ParamSet:
    """Ordered, uniquely named parameter tensors with gradient slots."""

    def __init__(self, params: Mapping[str, np.ndarray | Tensor] | None = None, frozen: bool = False):
        self._params: dict[str, Tensor] = {}
        self.frozen = frozen
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter id {name!r}")
        arr = np.array(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        if self.frozen:
            arr.flags.writeable = False
        t = Tensor(arr, requires_grad=not self.frozen, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        if self.frozen:
            raise GradientError("cannot load into a frozen ParamSet")
        if set(state) != set(self._params):
            missing = set(self._params) ^ set(state)
            raise KeyError(f"parameter ids differ: {sorted(missing)}")
        for k, v in state.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != self._params[k].shape:
                raise ShapeError(f"{k}: shape {arr.shape} != {self._params[k].shape}")
            self._params[k].data = arr.copy()

    def copy(self, frozen: bool | None = None) -> "ParamSet":
        return ParamSet(self.state(), frozen=self.frozen if frozen is None else frozen)

    def num_elements(self) -> int:
        return sum(p.size for p in self._params.values())


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    Defaults follow the post-training recipe: betas (0.9, 0.95), eps 1e-8,
    weight decay 0.05.
    """

    def __init__(
        self,
        params: ParamSet,
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
    ):
        if params.frozen:
            raise GradientError("cannot optimize a frozen ParamSet")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                raise GradientError(f"missing gradient for {name!r}")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            data = p.data * (1.0 - lr * self.weight_decay)
            data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            _check_finite(data, f"adamw update of {name!r}")
            p.data = data

    def state(self) -> dict:
        return {
            "step": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state(self, state: Mapping) -> None:
        self.step_count = int(state["step"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}
