"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Tape`.
Because nodes are appended in creation order the tape is already in
topological order, so :func:`backward` is a single reverse sweep.

Example::

    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    backward(loss)        # w.grad == [2., 4.]
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "backward",
    "grad",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "as_tensor",
    "concat",
    "no_grad",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the floating type used for newly created tensors (float32/float64)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


class default_dtype:
    """Context manager temporarily changing the default dtype."""

    def __init__(self, dtype):
        self.dtype = dtype

    def __enter__(self):
        self._saved = get_default_dtype()
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "index")

    def __init__(self, out, parents, backward_fn, index):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = index


class Tape:
    """Ordered record of primitive operations.

    A tape becomes active inside a ``with`` block. Outside any block a
    process-wide default tape is used; call :meth:`reset` (or open a fresh
    tape) once per forward pass so that recorded nodes do not pile up.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    # -- activation ---------------------------------------------------
    @classmethod
    def _stack(cls) -> list["Tape"]:
        stack = getattr(cls._local, "stack", None)
        if stack is None:
            stack = cls._local.stack = [Tape()]
        return stack

    @classmethod
    def active(cls) -> "Tape":
        return cls._stack()[-1]

    def __enter__(self) -> "Tape":
        self._stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._stack().pop()

    def reset(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward_fn) -> None:
        node = _Node(out, tuple(parents), backward_fn, len(self.nodes))
        self.nodes.append(node)
        out._node = node
        out._tape = self


class no_grad:
    """Disable recording on the active tape within the block."""

    def __enter__(self):
        self._tape = Tape.active()
        self._saved = self._tape.enabled
        self._tape.enabled = False

    def __exit__(self, *exc):
        self._tape.enabled = self._saved


def _to_array(value, dtype=None) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    if dtype is not None:
        return np.asarray(value, dtype=dtype)
    if isinstance(value, np.ndarray) and value.dtype.kind == "f":
        return value
    if isinstance(value, np.floating):
        return np.asarray(value)
    return np.asarray(value, dtype=_DTYPE)


def as_tensor(value, like: "Tensor | None" = None) -> "Tensor":
    """Wrap ``value``; plain constants adopt the dtype of ``like`` when given."""
    if isinstance(value, Tensor):
        return value
    if like is not None:
        return Tensor(np.asarray(value, dtype=like.dtype))
    return Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None


class Tensor:
    """N-dimensional array that can take part in reverse-mode differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = _to_array(data, dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[_Node] = None
        self._tape: Optional[Tape] = None

    # -- basic properties ---------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._node is not None

    # -- recording helper ---------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward_fn) -> "Tensor":
        out = Tensor(data)
        tape = Tape.active()
        if tape.enabled and any(p.tracked for p in parents):
            tape.record(out, parents, backward_fn)
        return out

    # -- arithmetic ---------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self)
        sa, sb = self.shape, other.shape
        _broadcast_shape(sa, sb)

        def bw(g, needs):
            return (_unbroadcast(g, sa) if needs[0] else None,
                    _unbroadcast(g, sb) if needs[1] else None)

        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self)
        sa, sb = self.shape, other.shape
        _broadcast_shape(sa, sb)

        def bw(g, needs):
            return (_unbroadcast(g, sa) if needs[0] else None,
                    _unbroadcast(-g, sb) if needs[1] else None)

        return Tensor._make(self.data - other.data, (self, other), bw)

    def __rsub__(self, other):
        return as_tensor(other, self) - self

    def __mul__(self, other):
        other = as_tensor(other, self)
        a, b = self.data, other.data
        _broadcast_shape(a.shape, b.shape)

        def bw(g, needs):
            return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                    _unbroadcast(g * a, b.shape) if needs[1] else None)

        return Tensor._make(a * b, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self)
        a, b = self.data, other.data
        _broadcast_shape(a.shape, b.shape)
        out = a / b

        def bw(g, needs):
            return (_unbroadcast(g / b, a.shape) if needs[0] else None,
                    _unbroadcast(-g * out / b, b.shape) if needs[1] else None)

        return Tensor._make(out, (self, other), bw)

    def __rtruediv__(self, other):
        return as_tensor(other, self) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g, needs: (-g,))

    def __getitem__(self, index):
        shape = self.shape
        parts = index if isinstance(index, tuple) else (index,)
        basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

        def bw(g, needs):
            full = np.zeros(shape, dtype=g.dtype)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), bw)

    # -- element-wise functions ---------------------------------------
    def log(self):
        x = self.data
        if np.any(x <= 0) or np.any(np.isnan(x)):
            raise DomainError(f"log requires strictly positive input (min={np.nanmin(x) if x.size else 'n/a'})")
        return Tensor._make(np.log(x), (self,), lambda g, needs: (g / x,))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g, needs: (g * out,))

    def square(self):
        x = self.data
        return Tensor._make(x * x, (self,), lambda g, needs: (2.0 * g * x,))

    def sqrt(self):
        x = self.data
        if np.any(x < 0) or np.any(np.isnan(x)):
            raise DomainError("sqrt requires non-negative input")
        out = np.sqrt(x)

        def bw(g, needs):
            with np.errstate(divide="ignore"):
                return (g * 0.5 / out,)

        return Tensor._make(out, (self,), bw)

    def clip(self, lo: float, hi: float):
        """Clamp into [lo, hi]; the gradient is passed only where no clamping happened."""
        x = self.data
        mask = (x >= lo) & (x <= hi)
        return Tensor._make(np.clip(x, lo, hi), (self,), lambda g, needs: (g * mask,))

    def sigmoid(self):
        x = self.data
        # stable for large |x|: never exponentiate a positive number
        e = np.exp(-np.abs(x))
        out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
        return Tensor._make(out, (self,), lambda g, needs: (g * out * (1.0 - out),))

    def leaky_relu(self, slope: float = 0.2):
        x = self.data
        scale = np.where(x > 0, 1.0, slope).astype(x.dtype, copy=False)
        return Tensor._make(x * scale, (self,), lambda g, needs: (g * scale,))

    # -- shape ops -----------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {src} into {shape}") from None
        return Tensor._make(out, (self,), lambda g, needs: (g.reshape(src),))

    def roll(self, shifts: Sequence[int], axes: Sequence[int]):
        shifts = tuple(int(s) for s in shifts)
        axes = tuple(axes)
        back = tuple(-s for s in shifts)
        return Tensor._make(np.roll(self.data, shifts, axes), (self,),
                            lambda g, needs: (np.roll(g, back, axes),))

    # -- reductions ----------------------------------------------------
    def _axes(self, axis):
        if axis is None:
            return tuple(range(self.ndim))
        if isinstance(axis, int):
            axis = (axis,)
        try:
            return tuple(sorted(a % self.ndim for a in axis)) if self.ndim else ()
        except ZeroDivisionError:
            raise ShapeError("cannot reduce a 0-d tensor along an axis") from None

    def sum(self, axis=None, keepdims: bool = False):
        if self.size == 0:
            raise ShapeError("empty reduction")
        axes = self._axes(axis)
        if any(a >= self.ndim for a in axes):
            raise ShapeError(f"axis {axis} out of range for shape {self.shape}")
        shape = self.shape
        kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

        def bw(g, needs):
            return (np.broadcast_to(g.reshape(kept), shape).copy(),)

        return Tensor._make(self.data.sum(axis=axes, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        if self.size == 0:
            raise ShapeError("empty reduction")
        axes = self._axes(axis)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        if count == 0:
            raise ShapeError("empty reduction")
        return self.sum(axis=axes, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g, needs):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) if needs[i] else None
            for i in range(len(tensors))
        )

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def _relevant_nodes(loss: Tensor, wrt: set[int]) -> tuple[list[_Node], set[int]]:
    """Nodes lying on some path from a tensor in ``wrt`` to ``loss``."""
    nodes = loss._tape.nodes[: loss._node.index + 1]
    reach = set(wrt)
    for node in nodes:
        if any(id(p) in reach for p in node.parents):
            reach.add(id(node.out))
    return [n for n in nodes if id(n.out) in reach], reach


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Return dLoss/dParam for every tensor in ``params`` without touching ``.grad``.

    Parameters that do not influence ``loss`` receive zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = list(params)
    if loss._node is None:
        return [np.zeros_like(p.data) for p in params]
    wrt = {id(p) for p in params}
    nodes, reach = _relevant_nodes(loss, wrt)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        needs = tuple(id(p) in reach for p in node.parents)
        parent_grads = node.backward_fn(g, needs)
        for p, pg, need in zip(node.parents, parent_grads, needs):
            if not need or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for p in params:
        g = grads.get(id(p))
        if g is None:
            if id(p) == id(loss):
                g = np.ones_like(p.data)
            else:
                g = np.zeros_like(p.data)
        out.append(np.asarray(g, dtype=p.data.dtype).reshape(p.shape))
    return out


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> dict[Tensor, np.ndarray]:
    """Accumulate dLoss/dParam into ``param.grad``.

    With ``params=None`` every leaf on the tape with ``requires_grad`` set is
    treated as a parameter. Detached leaves (no ``requires_grad``) are skipped. Gradients add onto existing ``.grad`` values;
    zeroing them is the caller's job. Returns a mapping parameter -> gradient
    of this call alone.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is None:
        if loss._node is None:
            params = [loss] if loss.requires_grad else []
        else:
            seen: dict[int, Tensor] = {}
            for node in loss._tape.nodes[: loss._node.index + 1]:
                for p in node.parents:
                    if p.requires_grad and p._node is None:
                        seen.setdefault(id(p), p)
            params = list(seen.values())
    params = [p for p in params if p.requires_grad or p._node is not None]
    grads = grad(loss, params)
    result = {}
    for p, g in zip(params, grads):
        p.grad = g.copy() if p.grad is None else p.grad + g
        result[p] = g
    return result


# Tensors hash by identity so they can key gradient maps.
Tensor.__hash__ = object.__hash__  # type: ignore[assignment]
Tensor.__eq__ = lambda self, other: self is other  # type: ignore[assignment]


def custom_op(data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray, tuple], tuple]) -> Tensor:
    """Record an operation whose adjoint is provided by ``backward_fn(g, needs)``."""
    return Tensor._make(data, parents, backward_fn)
