"""Dense 2-D float64 arithmetic with a define-by-run reverse-mode tape.

Every value handled here is a 2-D ``numpy.ndarray`` of dtype float64 (the
"Matrix" of the rest of the package).  Operations take :class:`Node` inputs,
compute the forward value eagerly and register a vector-Jacobian product on
the owning :class:`Tape`.  :meth:`Tape.backward` sweeps the tape in reverse
creation order, so accumulation order (and therefore every gradient bit) is
fixed by the order the forward pass was written in.

Example::

    tape = Tape()
    w = tape.leaf(np.ones((2, 1)), "w")
    x = tape.const(np.array([[1.0, 2.0]]))
    loss = sum_(sigmoid(x @ w))
    grads = tape.backward(loss)
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Mapping

import numpy as np

from .errors import ContractError, DimensionError, NumericError

EPS_CLIP = 1e-7

_perturbed_ops: set[str] = set()


@contextlib.contextmanager
def perturbed_gradient(kind: str, factor: float = 1.01) -> Iterator[None]:
    """Test hook: scale every VJP produced by op ``kind`` by ``factor``."""
    global _perturb_factor
    _perturbed_ops.add(kind)
    old, _perturb_factor = _perturb_factor, factor
    try:
        yield
    finally:
        _perturbed_ops.discard(kind)
        _perturb_factor = old


_perturb_factor = 1.01


def as_matrix(a, name: str = "value") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array (scalars become 1x1)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: contains non-finite entries")
    return arr


class Node:
    __slots__ = ("tape", "id", "kind", "value", "parents", "vjps", "grad", "name", "requires_grad")

    def __init__(self, tape, kind, value, parents=(), vjps=(), name=None, requires_grad=False):
        self.tape = tape
        self.id = len(tape.nodes)
        self.kind = kind
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def T(self) -> "Node":
        return transpose(self)

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __add__(self, other):
        if isinstance(other, Node):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node#{self.id}<{self.kind}{label} {self.value.shape}>"


class Tape:
    """Records nodes in creation order; one tape per minibatch."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value, name: str | None = None) -> Node:
        node = Node(self, "leaf", as_matrix(value, name or "leaf").copy(), name=name, requires_grad=True)
        self.nodes.append(node)
        return node

    def const(self, value, name: str | None = None) -> Node:
        node = Node(self, "const", as_matrix(value, name or "const"), name=name)
        self.nodes.append(node)
        return node

    def record(self, kind: str, value: np.ndarray, parents: tuple[Node, ...],
               vjps: tuple[Callable[[np.ndarray], np.ndarray], ...]) -> Node:
        for p in parents:
            if p.tape is not self:
                raise ContractError(f"{kind}: operands belong to different tapes")
        if not np.all(np.isfinite(value)):
            raise NumericError(f"{kind}: produced non-finite values")
        node = Node(self, kind, value, parents, vjps,
                    requires_grad=any(p.requires_grad for p in parents))
        self.nodes.append(node)
        return node

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Accumulate dloss/dnode into ``node.grad``; return named leaf gradients."""
        if loss.tape is not self:
            raise ContractError("loss node belongs to another tape")
        if loss.value.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or not node.parents:
                continue
            scale_ = _perturb_factor if node.kind in _perturbed_ops else 1.0
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.requires_grad:
                    continue
                g = vjp(node.grad)
                if scale_ != 1.0:
                    g = g * scale_
                parent.grad = g if parent.grad is None else parent.grad + g
        return {
            n.name: (n.grad if n.grad is not None else np.zeros_like(n.value))
            for n in self.nodes
            if n.kind == "leaf" and n.name is not None
        }


def _check_same(kind: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _check_same("add", a, b)
    return a.tape.record("add", a.value + b.value, (a, b), (lambda g: g, lambda g: g))


def sub(a: Node, b: Node) -> Node:
    _check_same("sub", a, b)
    return a.tape.record("sub", a.value - b.value, (a, b), (lambda g: g, lambda g: -g))


def mul(a: Node, b: Node) -> Node:
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.record("mul", av * bv, (a, b), (lambda g: g * bv, lambda g: g * av))


def scale(a: Node, c: float) -> Node:
    return a.tape.record("scale", a.value * c, (a,), (lambda g: g * c,))


def add_scalar(a: Node, c: float) -> Node:
    return a.tape.record("add_scalar", a.value + c, (a,), (lambda g: g,))


def add_row(x: Node, b: Node) -> Node:
    """``x + b`` with the 1xn row ``b`` repeated over every row of ``x``."""
    if b.shape != (1, x.shape[1]):
        raise DimensionError(f"add_row: bias {b.shape} does not fit {x.shape}")
    return x.tape.record("add_row", x.value + b.value, (x, b),
                         (lambda g: g, lambda g: g.sum(axis=0, keepdims=True)))


def log(a: Node) -> Node:
    av = a.value
    if np.any(av <= 0.0):
        raise ContractError("log: argument must be strictly positive")
    return a.tape.record("log", np.log(av), (a,), (lambda g: g / av,))


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):  # overflow surfaces as a NumericError in record()
        y = np.exp(a.value)
    return a.tape.record("exp", y, (a,), (lambda g: g * y,))


def sqrt(a: Node) -> Node:
    av = a.value
    if np.any(av <= 0.0):
        raise ContractError("sqrt: argument must be strictly positive")
    y = np.sqrt(av)
    return a.tape.record("sqrt", y, (a,), (lambda g: g * 0.5 / y,))


def relu(a: Node) -> Node:
    on = a.value > 0.0
    return a.tape.record("relu", np.where(on, a.value, 0.0), (a,), (lambda g: g * on,))


def sigmoid(a: Node, clip: float = EPS_CLIP) -> Node:
    """Logistic function clamped to ``[clip, 1 - clip]``; clamped entries pass no gradient."""
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    live = (y > clip) & (y < 1.0 - clip)
    y = np.clip(y, clip, 1.0 - clip)
    return a.tape.record("sigmoid", y, (a,), (lambda g: g * y * (1.0 - y) * live,))


# -- linear algebra and reductions --------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    with np.errstate(over="ignore", invalid="ignore"):
        out = av @ bv
    return a.tape.record("matmul", out, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def transpose(a: Node) -> Node:
    return a.tape.record("transpose", a.value.T.copy(), (a,), (lambda g: g.T,))


def sum_(a: Node, axis: int | None = None) -> Node:
    """Sum keeping 2-D shape: ``axis=None`` -> 1x1, ``0`` -> 1xn, ``1`` -> mx1."""
    shape = a.shape
    if axis is None:
        val = np.array([[a.value.sum()]])
    else:
        val = a.value.sum(axis=axis, keepdims=True)
    return a.tape.record("sum", val, (a,), (lambda g: np.broadcast_to(g, shape).copy(),))


def mean(a: Node) -> Node:
    n = a.value.size
    if n == 0:
        raise ContractError("mean of an empty matrix")
    shape = a.shape
    return a.tape.record("mean", np.array([[a.value.mean()]]), (a,),
                         (lambda g: np.full(shape, g[0, 0] / n),))


def take_rows(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return a.tape.record("take_rows", a.value[idx], (a,), (vjp,))


def log_softmax(a: Node) -> Node:
    """Row-wise log-softmax."""
    x = a.value
    shifted = x - x.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(y)
    return a.tape.record("log_softmax", y, (a,),
                         (lambda g: g - p * g.sum(axis=1, keepdims=True),))


def pairwise_sqdist(a: Node) -> Node:
    """NxN matrix of squared Euclidean distances between the rows of ``a``."""
    x = a.value
    diff = x[:, None, :] - x[None, :, :]
    d = np.einsum("ijk,ijk->ij", diff, diff)

    def vjp(g):
        s = g + g.T
        return 2.0 * (s.sum(axis=1, keepdims=True) * x - s @ x)

    return a.tape.record("pairwise_sqdist", d, (a,), (vjp,))


def _masked_select(kind: str, a: Node, mask, pick_max: bool) -> Node:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"{kind}: mask {mask.shape} does not match {a.shape}")
    if not np.all(mask.any(axis=1)):
        raise ContractError(f"{kind}: every row needs at least one selected entry")
    fill = -np.inf if pick_max else np.inf
    masked = np.where(mask, a.value, fill)
    # argmax/argmin return the first index on ties
    j = masked.argmax(axis=1) if pick_max else masked.argmin(axis=1)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, j] = g[:, 0]
        return out

    return a.tape.record(kind, a.value[rows, j][:, None], (a,), (vjp,))


def masked_row_max(a: Node, mask) -> Node:
    return _masked_select("masked_row_max", a, mask, True)


def masked_row_min(a: Node, mask) -> Node:
    return _masked_select("masked_row_min", a, mask, False)


# -- gradient checking ---------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Tensor-level relative error ``max|a-n| / max(max|a|, max|n|, floor)``."""
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    size = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / size)


def check_gradients(build: Callable[[Tape, dict[str, Node]], Node],
                    arrays: Mapping[str, np.ndarray], h: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients of ``build`` against central finite differences.

    ``build(tape, leaves)`` must return a 1x1 node; it is re-run from scratch for
    every perturbed entry.  Returns the relative error per named input.
    """
    arrays = {k: as_matrix(v, k).copy() for k, v in arrays.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in arrays.items()}
    analytic = tape.backward(build(tape, leaves))

    def evaluate(current):
        t = Tape()
        return build(t, {k: t.leaf(v, k) for k, v in current.items()}).item()

    errors = {}
    for name, base in arrays.items():
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + h
            up = evaluate(arrays)
            base[idx] = orig - h
            down = evaluate(arrays)
            base[idx] = orig
            numeric[idx] = (up - down) / (2.0 * h)
        errors[name] = relative_error(analytic[name], numeric)
    return errors
