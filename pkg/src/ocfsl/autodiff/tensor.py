"""Dense tensors with a recording tape for reverse-mode differentiation.

Values live in numpy arrays. An operation is recorded only while a
:class:`Tape` is active and at least one input requires a gradient; outside a
tape every op is a plain numpy computation, which is what evaluation uses.
"""
from __future__ import annotations

import numpy as np

_DTYPE = np.float64
_ACTIVE: list["Tape"] = []
CHECK_FINITE = False


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def get_default_dtype():
    return _DTYPE


def set_check_finite(flag: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = bool(flag)


class Tensor:
    """A value plus the bookkeeping needed to send gradients back through it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self):
        return len(self.data)

    # operator sugar; the functions live in ops.py
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Ordered record of the ops executed while it is active.

    Nodes are appended in execution order, so the list is already
    topologically sorted. ``params`` is the registry of named trainable
    leaves whose gradients :func:`backward` reports.
    """

    def __init__(self, params=None):
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}
        self.params = dict(params) if params is not None else {}

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def watch(self, params):
        self.params.update(params)


def recording() -> bool:
    return bool(_ACTIVE)


def make(data, parents, backward_fn, op):
    """Wrap an op result, recording it when a tape is active."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    if _ACTIVE and any(p.requires_grad for p in parents):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        tape.nodes.append(out)
        leaves = tape.leaves
        for p in parents:
            if p.requires_grad and p.backward_fn is None:
                leaves[id(p)] = p
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


class SparseGrad:
    """Gradient that is nonzero only on ``data[index]``; avoids dense zeros."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


def backward(tape: Tape, loss: Tensor) -> dict:
    """Populate ``.grad`` on every node and leaf reachable from ``loss``.

    Returns a name -> gradient map over ``tape.params``; parameters the loss
    does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    for node in tape.nodes:
        node.grad = None
    for leaf in tape.leaves.values():
        leaf.grad = None
    for p in tape.params.values():
        p.grad = None
    loss.grad = np.ones_like(loss.data)
    owned = set()
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if isinstance(pg, SparseGrad):
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                    owned.add(id(parent))
                elif id(parent) not in owned:
                    parent.grad = parent.grad.copy()
                    owned.add(id(parent))
                parent.grad[pg.index] += pg.value
            elif parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg
                owned.add(id(parent))
    out = {}
    for name, p in tape.params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out
