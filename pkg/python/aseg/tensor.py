"""
Reverse-mode autodiff core.

A ``Tensor`` wraps a numpy array. Every differentiable op in ``aseg.ops``
attaches a ``Record`` (op name, inputs, backward closure over the saved
activations) to its output. ``Tape.from_output(loss)`` linearises the
records reachable from a loss in topological order and ``backward`` walks
them once in reverse.

Usage:
    x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
    loss = ops.total(ops.relu(x))
    backward(loss)
    x.grad
"""

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import GradientError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable record keeping for the ops run inside the block (per thread)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Record:
    """One tape entry: which op produced a tensor and how to push grads back."""

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense numeric array with an optional gradient.

    Feature maps are N×C×H×W; losses are 0-d. The array is never modified
    by ops; only ``grad`` changes, and only inside ``backward``.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._record: Optional[Record] = None

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
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        from . import ops
        return ops.add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        from . import ops
        if isinstance(other, Tensor):
            return ops.hadamard(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from . import ops
        return ops.scale(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self + (-_as_tensor(other, self))


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


class Parameter(Tensor):
    """A named, optionally trainable tensor owned by a layer."""

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    @property
    def value(self) -> "Parameter":
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, trainable={self.trainable})"


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor],
              backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, attaching a tape record when grads are needed."""
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = Record(op, tuple(inputs), backward_fn)
    return out


class Tape:
    """Records reachable from one output, inputs before outputs."""

    def __init__(self, order: List[Tensor]):
        self.order = order

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._record is not None:
                for parent in node._record.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    @property
    def records(self) -> List[Record]:
        return [t._record for t in self.order if t._record is not None]

    def __len__(self) -> int:
        return len(self.order)

    def backward(self, seed: np.ndarray) -> None:
        """Propagate ``seed`` (d loss / d output) through every record once."""
        output = self.order[-1]
        grads = {id(output): seed}
        for node in reversed(self.order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            record = node._record
            if record is None:
                continue
            for parent, pg in zip(record.inputs, record.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> None:
    """Populate ``grad`` on everything that ``loss`` depends on.

    ``params`` not reached by the loss get a zero gradient.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        Tape.from_output(loss).backward(np.ones_like(loss.data))
    for p in params or ():
        if p.grad is None:
            p.zero_grad()


def grad_check(op_closure: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between backprop and central finite differences.

    The scalar under test is ``sum(r * op_closure(*inputs))`` for a seeded
    random projection ``r``. Run it in float64; ops inside the closure must
    be deterministic (no dropout).
    """
    from . import ops

    inputs = list(inputs)
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    try:
        out = op_closure(*inputs)
        proj = np.random.default_rng(seed).standard_normal(out.shape)
        backward(ops.weighted_sum(out, proj))
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                    for t in inputs]

        def value() -> float:
            with no_grad():
                return float(np.sum(op_closure(*inputs).data * proj))

        worst = 0.0
        for t, a in zip(inputs, analytic):
            numeric = np.zeros_like(t.data)
            for idx in np.ndindex(t.data.shape):
                orig = t.data[idx]
                t.data[idx] = orig + eps
                f_plus = value()
                t.data[idx] = orig - eps
                f_minus = value()
                t.data[idx] = orig
                numeric[idx] = (f_plus - f_minus) / (2.0 * eps)
            denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
            worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag
            t.grad = None
