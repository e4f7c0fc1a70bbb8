"""Dense tensors with define-by-run reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records a :class:`Node`
holding its inputs and a closure mapping the upstream gradient to per-input
gradients. :func:`backward` walks the nodes reachable from a scalar loss in
reverse recording order and accumulates into ``grad`` of the leaves.
"""
from __future__ import annotations

import itertools
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def debug_enabled() -> bool:
    return getattr(_state, "debug", os.environ.get("AVNET_DEBUG", "") not in ("", "0"))


def set_debug(flag: bool) -> None:
    """Toggle finiteness checks on every forward result (this thread)."""
    _state.debug = flag


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """An ndarray plus the bookkeeping needed for gradients."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._retain = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def retain_grad(self) -> "Tensor":
        """Keep ``grad`` on this non-leaf tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("neg", self), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("neg", self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op's output and record it when any input needs a gradient.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    if debug_enabled() and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------- elementwise

_BINARY = ("add", "sub", "mul", "div")
_UNARY = ("neg", "relu", "exp", "log", "square")


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Elementwise op on equal-shaped tensors, or a tensor and a scalar.

    Binary kinds: add, sub, mul, div. Unary kinds (``b`` omitted): neg, relu,
    exp, log, square.
    """
    a = as_tensor(a)
    if op_kind in _UNARY:
        if b is not None:
            raise TypeError(f"{op_kind} is unary")
        return _unary(op_kind, a)
    if op_kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {op_kind!r}")

    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise ValueError(f"{op_kind}: shape mismatch {a.shape} vs {b.shape}")
        return _binary_tensor(op_kind, a, b)
    if not np.isscalar(b):
        raise TypeError(f"{op_kind}: second operand must be a Tensor or scalar, got {type(b).__name__}")
    return _binary_scalar(op_kind, a, b)


def _binary_tensor(kind: str, a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    if kind == "add":
        out = x + y
        fn = lambda g: (g, g)
    elif kind == "sub":
        out = x - y
        fn = lambda g: (g, -g)
    elif kind == "mul":
        out = x * y
        fn = lambda g: (g * y, g * x)
    else:
        out = x / y
        fn = lambda g: (g / y, -g * x / (y * y))
    return make_result(out, kind, (a, b), fn)


def _binary_scalar(kind: str, a: Tensor, s) -> Tensor:
    x = a.data
    s = x.dtype.type(s)
    if kind == "add":
        out, fn = x + s, (lambda g: (g,))
    elif kind == "sub":
        out, fn = x - s, (lambda g: (g,))
    elif kind == "mul":
        out, fn = x * s, (lambda g: (g * s,))
    else:
        out, fn = x / s, (lambda g: (g / s,))
    return make_result(out, kind, (a,), fn)


def _unary(kind: str, a: Tensor) -> Tensor:
    x = a.data
    if kind == "neg":
        out, fn = -x, (lambda g: (-g,))
    elif kind == "relu":
        mask = x > 0
        out = np.where(mask, x, x.dtype.type(0))
        fn = lambda g: (g * mask,)
    elif kind == "exp":
        out = np.exp(x)
        fn = lambda g: (g * out,)
    elif kind == "log":
        out = np.log(x)
        fn = lambda g: (g / x,)
    else:
        out = x * x
        fn = lambda g: (2 * g * x,)
    return make_result(out, kind, (a,), fn)


def relu(a: Tensor) -> Tensor:
    return elementwise("relu", a)


def tensor_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return make_result(np.asarray(a.data.sum(), dtype=dtype), "sum", (a,),
                       lambda g: (np.full(shape, g, dtype=dtype),))


def tensor_mean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    return make_result(np.asarray(a.data.mean(), dtype=dtype), "mean", (a,),
                       lambda g: (np.full(shape, g / n, dtype=dtype),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def dot_weights(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(a * weights)`` against a constant array."""
    w = np.asarray(weights, dtype=a.dtype)
    if w.shape != a.shape:
        raise ValueError(f"dot_weights: shape mismatch {a.shape} vs {w.shape}")
    return make_result(np.asarray((a.data * w).sum(), dtype=a.dtype), "dot_weights", (a,),
                       lambda g: (g * w,))


# ------------------------------------------------------------------- backward

@dataclass
class GradTape:
    """Recorded nodes reachable from one loss, in recording order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def collect(cls, root: Tensor) -> "GradTape":
        seen: set[int] = set()
        found = []
        stack = [root._node] if root._node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            found.append(node)
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        found.sort(key=lambda n: n.seq)
        return cls(found)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf reachable from ``loss``.

    Gradients add into any existing ``grad``; zeroing is the caller's job.
    The recorded graph is released afterwards, so a second call on the same
    loss raises.
    """
    if loss.size != 1 or loss.data.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._node is None:
        _accumulate(loss, seed)
        return
    if loss._node.consumed:
        raise RuntimeError("graph already consumed by a previous backward; re-run the forward pass")

    tape = GradTape.collect(loss)
    pending: dict[int, np.ndarray] = {id(loss._node): seed}
    for node in reversed(tape.nodes):
        g_out = pending.pop(id(node), None)
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t._node is None:
                _accumulate(t, g)
                continue
            if t._retain:
                _accumulate(t, g)
            key = id(t._node)
            if key in pending:
                pending[key] = pending[key] + g
            else:
                pending[key] = g
    for node in tape.nodes:
        node.inputs = ()
        node.backward_fn = None
        node.consumed = True


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ------------------------------------------------------------ gradient oracle

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int = 0           # coordinates within epsilon of a kink
    worst_index: int = -1
    unresolved: int = 0        # loss change lost in float roundoff


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5,
                      indices: Sequence[int] | None = None, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps ``x`` to a tensor; non-scalar outputs are reduced with a fixed
    random projection so that every output element is exercised. ``x`` is
    perturbed in place (and restored), so it may be a model parameter that
    ``f`` reads through a closure. ``indices`` restricts the numeric sweep to
    a subset of flat positions.
    """
    return gradient_check(f, x, epsilon, indices, seed).max_rel_error


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5,
                   indices: Sequence[int] | None = None, seed: int = 0,
                   kink_tol: float | None = None, resolve_ulps: float | None = None) -> GradCheckResult:
    """Like ``finite_diff_check`` but returns counts as well.

    With ``kink_tol`` set, a coordinate whose forward and backward one-sided
    slopes disagree by more than ``kink_tol`` (relative) straddles a
    non-differentiable point (ReLU or max switch) inside the probe interval;
    it is counted in ``skipped`` instead of scored.

    With ``resolve_ulps`` set, a coordinate whose central difference
    ``f(x+h) - f(x-h)`` spans fewer than that many ulps of ``f(x)`` cannot be
    estimated to useful relative precision; it is counted in ``unresolved``.
    """
    proj = {}

    def scalar(t: Tensor) -> Tensor:
        out = f(t)
        if out.size == 1:
            return out
        if "w" not in proj:
            proj["w"] = np.random.default_rng(seed).standard_normal(out.shape)
        return dot_weights(out, proj["w"])

    was = x.requires_grad
    saved_grad = x.grad
    x.requires_grad = True
    x.grad = None
    out = scalar(x)
    f0 = out.item()
    if out.requires_grad:
        backward(out)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).astype(np.float64)
    x.grad = saved_grad
    x.requires_grad = was

    flat = x.data.reshape(-1)
    idx = range(x.size) if indices is None else indices
    worst, worst_i, checked, skipped, unresolved = 0.0, -1, 0, 0, 0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = scalar(x).item()
            flat[i] = orig - epsilon
            fm = scalar(x).item()
            flat[i] = orig
            if resolve_ulps is not None and abs(fp - fm) < resolve_ulps * np.spacing(abs(f0)):
                unresolved += 1
                continue
            if kink_tol is not None:
                right, left = (fp - f0) / epsilon, (f0 - fm) / epsilon
                if abs(right - left) > kink_tol * max(1e-8, abs(right) + abs(left)):
                    skipped += 1
                    continue
            numeric = (fp - fm) / (2.0 * epsilon)
            a = analytic[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            checked += 1
            if err > worst:
                worst, worst_i = err, int(i)
    return GradCheckResult(worst, checked, skipped, worst_i, unresolved)
