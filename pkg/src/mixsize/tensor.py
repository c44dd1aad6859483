"""Dense tensor with tape-based reverse-mode autodiff.

Every differentiable op records a :class:`Node` carrying a monotonically
increasing sequence number. :func:`backward` collects the nodes reachable
from the loss and replays them in descending sequence order, which is the
reverse execution order of the tape.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float32
_grad_enabled = True
_debug = False
_seq = itertools.count()


class NumericError(FloatingPointError):
    """Raised when a non-finite value shows up where it must not."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    if isinstance(dtype, str):
        dtype = _DTYPES[dtype]
    _default_dtype = np.dtype(dtype).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating-point precision."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for NaN/Inf while active."""
    global _debug
    prev = _debug
    _debug = enabled
    try:
        yield
    finally:
        _debug = prev


class Node:
    __slots__ = ("seq", "inputs", "backward_fn", "name")

    def __init__(self, inputs, backward_fn, name):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar; real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.mul(other, -1.0))

    def sum(self):
        from . import ops
        return ops.sum(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    """Wrap an op result and register it on the tape when any input needs grad.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    if _debug and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite output from {name}")
    out = Tensor(out_data, dtype=out_data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(tuple(inputs), backward_fn, name)
    return out


def _reachable(root: Tensor):
    nodes = {}
    stack = [root]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is not None:
            nodes[t._node.seq] = t
            stack.extend(i for i in t._node.inputs if i.requires_grad)
    return [nodes[k] for k in sorted(nodes, reverse=True)]


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1 and grad is None:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss was not produced under an active tape")
    if grad is None:
        grad = np.ones_like(loss.data)
    pending = {id(loss): grad}
    for t in _reachable(loss):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
                else:
                    inp.grad += gi
            else:
                k = id(inp)
                pending[k] = pending[k] + gi if k in pending else gi
    if loss._node is None and loss.requires_grad:
        loss.grad = grad if loss.grad is None else loss.grad + grad


def parameters_of(tensors: Iterable[Tensor]):
    return [t for t in tensors if t.requires_grad]
