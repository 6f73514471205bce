"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray plus an optional provenance Node recording the
operation kind and input tensors that produced it. backward() walks the
graph once in reverse topological order and accumulates gradients into the
leaves that asked for them.

The engine runs in one of two float precisions at a time: float64 for
testing and gradient checking, float32 for training. The mode is a global
setting; tensors remember the dtype they were created with.
"""

from __future__ import annotations

import contextlib

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_default_dtype = np.float64


def default_dtype():
    """Current global engine dtype (numpy scalar type)."""
    return _default_dtype


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype).type
    if dt not in _FLOAT_DTYPES:
        raise ValueError(f"engine dtype must be float32 or float64, got {np.dtype(dtype)}")
    global _default_dtype
    _default_dtype = dt


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the global engine dtype."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class GraphError(RuntimeError):
    """Raised for invalid backward calls (non-scalar root, detached root)."""


class Node:
    """Provenance record: op kind, the input tensors, and a backward closure.

    backward_fn maps the gradient w.r.t. this node's output to a tuple of
    gradients w.r.t. each input (None for inputs that need no gradient).
    """

    __slots__ = ("kind", "inputs", "backward_fn")

    def __init__(self, kind, inputs, backward_fn):
        self.kind = kind
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.kind}, n_inputs={len(self.inputs)})"


class Tensor:
    """Dense array with optional gradient and provenance.

    Leaves are tensors without a node; only leaves with requires_grad=True
    receive a .grad after backward(). Non-float input data is cast to the
    global engine dtype; float32/float64 input keeps its dtype so a graph is
    uniformly in whichever precision its leaves were built with.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad=False, node=None, name=None):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.name = name

    # -- convenience views on the payload ------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.node is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _reject_item(self)

    def detach(self):
        """Same data, no provenance, no gradient request."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        if self.name:
            tag = self.name
        elif self.node is not None:
            tag = self.node.kind
        else:
            tag = "leaf"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, {tag})"

    # -- backward -------------------------------------------------------
    def backward(self):
        """Accumulate gradients of this scalar into requires_grad leaves.

        The root must have exactly one element. Each leaf's .grad is summed
        into (not replaced), so repeated backward calls accumulate like
        separate loss terms.
        """
        if self.size != 1:
            raise GraphError(f"backward root must be scalar-sized, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward root does not require grad; graph is detached")

        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for t in order:
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            in_grads = t.node.backward_fn(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.data.shape:
                    raise GraphError(
                        f"{t.node.kind}: backward produced shape {ig.shape} "
                        f"for input of shape {inp.data.shape}"
                    )
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig


def _reject_item(t):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def _toposort(root):
    """Tensors reachable from root that require grad, output-first order."""
    order = []
    seen = set()
    # Iterative DFS with an explicit stack; graphs from unrolled training
    # steps get deep enough that recursion is not safe.
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                stack.append((inp, False))
    order.reverse()
    return order


def as_tensor(x, requires_grad=False):
    """Wrap x as a Tensor in the global engine dtype (pass-through for Tensor)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype), requires_grad=requires_grad)


def constant(x):
    """Non-differentiable tensor in the global engine dtype."""
    return Tensor(np.asarray(x, dtype=_default_dtype), requires_grad=False)
