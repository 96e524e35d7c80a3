"""Dense tensors with a per-forward-pass reverse-mode tape.

A :class:`Tensor` wraps a numpy array. Every differentiable op in
:mod:`dipformer.ops` records its parents and a closure mapping the output
gradient to parent gradients; :meth:`Tensor.backward` replays those closures
in reverse topological order.
"""

from __future__ import annotations

import contextlib
import enum
import threading
from collections import defaultdict
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, UsageError

MAX_NDIM = 4


class Precision(enum.Enum):
    STANDARD = "standard"
    VERIFICATION = "verification"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.STANDARD else np.float64)


_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_precision() -> Precision:
    return _get("precision", Precision.STANDARD)


def set_precision(mode: Precision | str) -> None:
    _state.precision = Precision(mode)


@contextlib.contextmanager
def precision(mode: Precision | str) -> Iterator[None]:
    """Temporarily switch the scalar type used for new tensors."""
    prev = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-d array (at most 4 axes, NCHW by convention) with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = get_precision().dtype
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        if arr.ndim > MAX_NDIM:
            raise DimensionError(f"tensors have at most {MAX_NDIM} axes, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        if data.ndim > MAX_NDIM:
            raise DimensionError(f"op {op} produced {data.ndim} axes")
        out.data = data
        out.grad = None
        out.op = op
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=get_precision().dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, *shape: int, requires_grad: bool = False) -> "Tensor":
        return cls(np.ones(shape, dtype=get_precision().dtype), requires_grad=requires_grad)

    # -- array protocol -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    # -- operators (implemented in ops) --------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops
        return ops.permute(self, axes)

    def sum(self):
        from . import ops
        return ops.sum(self)

    def mean(self):
        from . import ops
        return ops.mean(self)

    # -- autodiff -------------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it.

        Gradients accumulate into existing ``grad`` arrays; call
        :meth:`zero_grad` on leaves between steps.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if pg.shape != p.data.shape:
                    raise DimensionError(f"{node.op} backward gave {pg.shape} for parent {p.shape}")
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, np.ndarray) and x.dtype.kind == "f":
        dtype = x.dtype
    return Tensor(x, dtype=dtype)


class OpCounter:
    """Multiply-add tally keyed by slash-separated region labels.

    Use as a context manager to activate it; ops report into the innermost
    region opened with :func:`region`.
    """

    def __init__(self):
        self.multiply_adds: dict[str, int] = defaultdict(int)
        self.notes: dict[str, int] = {}
        self._stack: list[str] = []
        self._prev: OpCounter | None = None

    def __enter__(self) -> "OpCounter":
        self._prev = _get("counter", None)
        _state.counter = self
        return self

    def __exit__(self, *exc) -> None:
        _state.counter = self._prev

    @property
    def path(self) -> str:
        return "/".join(self._stack) or "<root>"

    def add(self, n: int) -> None:
        self.multiply_adds[self.path] += int(n)

    def note(self, label: str, value: int) -> None:
        full = "/".join(self._stack + [label])
        self.notes[full] = int(value)

    def total(self, prefix: str = "") -> int:
        if not prefix:
            return sum(self.multiply_adds.values())
        return sum(v for k, v in self.multiply_adds.items() if k == prefix or k.startswith(prefix + "/"))


def active_counter() -> OpCounter | None:
    return _get("counter", None)


@contextlib.contextmanager
def region(label: str) -> Iterator[None]:
    """Attribute multiply-adds inside the block to ``label`` (nested)."""
    counter = active_counter()
    if counter is None:
        yield
        return
    counter._stack.append(label)
    try:
        yield
    finally:
        counter._stack.pop()


def count_macs(n: int) -> None:
    counter = active_counter()
    if counter is not None:
        counter.add(n)


def note(label: str, value: int) -> None:
    counter = active_counter()
    if counter is not None:
        counter.note(label, value)
