"""Tensor container and the gradient tape used for reverse-mode differentiation."""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ACTIVE_TAPES: contextvars.ContextVar[tuple] = contextvars.ContextVar("active_tapes", default=())


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""

    def __init__(self, primitive: str, count: int):
        super().__init__(f"primitive '{primitive}' produced {count} non-finite value(s)")
        self.primitive = primitive


class Tensor:
    """Dense float64 array with an optional gradient flag."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar over the primitives in ``ops``
    def __add__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.add(self, other)
        return ops.add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.sub(self, other)
        return ops.add_scalar(self, -float(other))

    def __rsub__(self, other):
        from . import ops

        return ops.add_scalar(ops.scalar_mul(self, -1.0), float(other))

    def __neg__(self):
        from . import ops

        return ops.scalar_mul(self, -1.0)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scalar_mul(self, float(other))

    __rmul__ = __mul__


@dataclass
class Node:
    primitive: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitives executed while the tape is active.

    Tapes nest; a primitive is recorded on the innermost active tape only.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPES.set(_ACTIVE_TAPES.get() + (self,))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.reset(self._token)
        self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each of ``sources``.

        Sources the loss does not depend on get a zero array.
        """
        sources = list(sources)
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if not any(node.output is loss for node in self.nodes):
            raise ValueError("loss was not produced on this tape (detached loss)")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in node.inputs)
            in_grads = node.backward(g, needs)
            for t, need, gi in zip(node.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def active_tape() -> Tape | None:
    tapes = _ACTIVE_TAPES.get()
    return tapes[-1] if tapes else None


@contextmanager
def no_grad():
    """Suspend recording; primitives run forward only."""
    token = _ACTIVE_TAPES.set(())
    try:
        yield
    finally:
        _ACTIVE_TAPES.reset(token)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def emit(primitive: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap a primitive's forward result, checking finiteness and recording it."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(primitive, int(np.size(data) - np.count_nonzero(np.isfinite(data))))
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(primitive, inputs, out, backward))
    return out
