"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an f32/f64 ndarray. Operations (see ``ops`` and
``fftops``) build a DAG by storing parent links and a backward closure on
each result. ``Tape.trace(root)`` linearizes the DAG parents-first;
``Tape.backward`` walks it in reverse, so every node's gradient is complete
before its parents consume it. Image tensors follow the (batch, channel,
height, width) convention.

Tensors are value-semantic inside a graph: no op mutates its inputs.
Optimizers update ``.data`` in place *between* graphs, which is outside the
autodiff contract.
"""

import os

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible. The message names both shapes."""


_GRAD_ENABLED = True
CHECK_FINITE = os.environ.get("CTMAR_CHECK_FINITE", "").strip() in ("1", "true", "yes")


class no_grad:
    """Context manager: ops executed inside record no graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled():
    return _GRAD_ENABLED


def set_check_finite(flag):
    """Eagerly verify every op output is finite (slows hot loops)."""
    global CHECK_FINITE
    CHECK_FINITE = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)  # f32 is the default compute dtype
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bw = None

    # -- construction used by ops ------------------------------------
    @staticmethod
    def _result(data, parents, bw):
        """Graph node: ``bw(out_grad) -> per-parent gradient arrays``."""
        if CHECK_FINITE and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite value produced by a forward op")
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bw = bw
        return out

    # -- basic protocol ----------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        Tape.trace(self).backward(self, seed)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # Operator sugar delegates to ops (imported lazily to avoid a cycle).
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

        return self * -1.0


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Tape:
    """Topologically ordered record of the graph under a root node.

    ``nodes`` lists every reachable tensor with parents strictly before
    children, so the reversed walk in :meth:`backward` finalizes each
    node's gradient before any parent reads it.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, root, seed=None):
        if seed is None:
            if root.data.size != 1:
                raise ShapeError(
                    f"backward() on non-scalar of shape {root.data.shape} needs an explicit seed"
                )
            seed = np.ones_like(root.data)
        else:
            seed = np.asarray(seed, dtype=root.data.dtype)
            if seed.shape != root.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} does not match root shape {root.data.shape}"
                )
        flowing = {id(root): seed}
        for node in reversed(self.nodes):
            g = flowing.pop(id(node), None)
            if g is None or not node.requires_grad:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._bw is None:
                continue
            parts = node._bw(g)
            for parent, pg in zip(node._parents, parts):
                if pg is None or not parent.requires_grad:
                    continue
                k = id(parent)
                if k in flowing:
                    flowing[k] = flowing[k] + pg
                else:
                    flowing[k] = pg


def parameters_of(*modules):
    """Flatten .params() of several layer objects into one list."""
    out = []
    for m in modules:
        out.extend(m.params())
    return out


def param_count(module):
    return sum(int(np.prod(p.shape)) for p in module.params())
