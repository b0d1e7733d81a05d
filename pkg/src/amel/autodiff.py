"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is tape-based: while a :class:`Tape` is active (see
:func:`recording`), every differentiable operation appends one record with
the ids of its input nodes, the id of its output node and a backward rule.
``Tape.backward`` replays the records in strict reverse order, accumulating
gradients additively in a store keyed by node id.

Backward rules receive the gradient of the loss w.r.t. the op output and
return one array (or ``None``) per input. Rules must never mutate the arrays
they are given; the tape never mutates stored gradients in place either, so
returning views or the upstream gradient object itself is safe.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import GradientError

_FLOAT_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_default_dtype(dtype) -> None:
    """Set the dtype used when tensors are created from non-float data.

    Training uses float32 for throughput; gradient-check builds switch to
    float64 because central differences are unreliable in single precision.
    """
    global _default_dtype
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dt


class Tensor:
    """Dense row-major floating-point array with optional gradient tracking.

    ``node_id`` identifies the tensor on the tape it last participated in;
    it is reassigned whenever the tensor is touched under a different tape.
    A tensor with ``requires_grad=False`` never receives a gradient.
    """

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """A view of the same values that no gradient flows through."""
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar for loss composition; the real rules live in ops.py.
    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from . import ops

        return ops.mul(self, other)


BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Record:
    __slots__ = ("out_id", "in_ids", "in_needs", "in_shapes", "rule")

    def __init__(self, out_id, in_ids, in_needs, in_shapes, rule):
        self.out_id = out_id
        self.in_ids = in_ids
        self.in_needs = in_needs
        self.in_shapes = in_shapes
        self.rule = rule


class Tape:
    """Ordered log of differentiable operations plus the gradient store."""

    def __init__(self):
        self._records: list[_Record] = []
        self._grads: dict[int, np.ndarray] = {}
        self._next_id = 0

    def __len__(self) -> int:
        return len(self._records)

    def _node_id(self, t: Tensor) -> int:
        if t.tape is not self:
            t.tape = self
            t.node_id = self._next_id
            self._next_id += 1
        return t.node_id

    def record(self, output: Tensor, inputs: Iterable[Tensor], rule: BackwardRule) -> None:
        inputs = tuple(inputs)
        in_ids = tuple(self._node_id(t) for t in inputs)
        out_id = self._node_id(output)
        self._records.append(
            _Record(
                out_id,
                in_ids,
                tuple(t.requires_grad for t in inputs),
                tuple(t.shape for t in inputs),
                rule,
            )
        )

    def backward(self, loss: Tensor) -> None:
        """Populate the gradient store for everything upstream of ``loss``.

        Deterministic for a fixed tape: records are replayed newest-first and
        gradients accumulate additively at fan-out points.
        """
        if loss.tape is not self or loss.node_id is None:
            raise GradientError("loss tensor is not recorded on this tape")
        if loss.shape != ():
            raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
        self._grads = {loss.node_id: np.ones((), dtype=loss.data.dtype)}
        for rec in reversed(self._records):
            g_out = self._grads.get(rec.out_id)
            if g_out is None:
                continue
            in_grads = rec.rule(g_out)
            for in_id, needs, shape, g in zip(rec.in_ids, rec.in_needs, rec.in_shapes, in_grads):
                if not needs or g is None:
                    continue
                if g.shape != shape:
                    raise GradientError(
                        f"backward rule produced gradient of shape {g.shape} for input of shape {shape}"
                    )
                acc = self._grads.get(in_id)
                self._grads[in_id] = g if acc is None else acc + g

    def grad(self, t: Tensor) -> Optional[np.ndarray]:
        """Gradient accumulated for ``t``, or None if it received none."""
        if t.tape is not self or t.node_id is None:
            return None
        return self._grads.get(t.node_id)


_active_tape: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _active_tape


@contextmanager
def recording(tape: Tape):
    """Make ``tape`` the active tape for ops run inside the block.

    Tapes and their tensors are confined to one execution context; nesting a
    second tape inside an active one is a programming error.
    """
    global _active_tape
    if _active_tape is not None:
        raise GradientError("a tape is already active in this context")
    _active_tape = tape
    try:
        yield tape
    finally:
        _active_tape = None


def apply_op(out_data: np.ndarray, inputs: Sequence[Tensor], rule: BackwardRule) -> Tensor:
    """Wrap an op result, recording it when gradients are being traced.

    This is the extension point for new differentiable operations: compute
    the forward value with numpy, then hand the inputs and a backward rule
    to this function.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape
    if requires and tape is not None:
        tape.record(out, inputs, rule)
    return out
