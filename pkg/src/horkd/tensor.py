"""Dense float64 tensors with reverse-mode automatic differentiation.

Graphs are built define-by-run: each operation allocates a fresh output
tensor that records its parent tensors and a closure pushing adjoints back
to them.  ``backward`` resets the gradients of every node reachable from
the loss and then walks the graph once in reverse topological order, so
repeated backward calls on the same graph yield identical gradients.

Everything is 64-bit; only exact-shape and scalar broadcasting exist.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_SCALAR_TYPES = (int, float, np.integer, np.floating)


class Tensor:
    """A dense float64 array that may participate in a computation graph.

    Leaves are built directly (``Tensor(values, requires_grad=True)``);
    non-leaf tensors come out of the operations below.  ``grad`` is filled
    by ``backward`` for every node that requires a gradient.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @classmethod
    def _result(cls, values: np.ndarray, parents: Sequence["Tensor"], op: str,
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents)
        out._backward = backward if out.requires_grad else None
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.values)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # inverse of scalar broadcast: collapse the upstream grad onto a size-1 operand
    if grad.shape == shape:
        return grad
    return np.asarray(np.sum(grad), dtype=np.float64).reshape(shape)


def _binary(a, b, op: str, fwd, grad_a, grad_b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b)
    if a.shape != b.shape and a.values.size != 1 and b.values.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} neither match nor "
                         f"allow scalar broadcast")
    av, bv = a.values, b.values
    out_values = fwd(av, bv)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += _reduce_to(grad_a(g, av, bv), a.shape)
        if b.requires_grad:
            b.grad += _reduce_to(grad_b(g, av, bv), b.shape)

    return Tensor._result(out_values, (a, b), op, backward)


def add(a, b) -> Tensor:
    return _binary(a, b, "add", lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, "sub", lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, "mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scale(a, c) -> Tensor:
    """a * c for a plain number c (the only non-tensor scalar product)."""
    if not isinstance(c, _SCALAR_TYPES):
        raise TypeError(f"scale factor must be a number, got {type(c).__name__}")
    a = _wrap(a)
    c = float(c)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * c

    return Tensor._result(a.values * c, (a,), "scale", backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.values > 0.0

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * mask

    return Tensor._result(np.where(mask, a.values, 0.0), (a,), "relu", backward)


def absolute(a) -> Tensor:
    """|a| elementwise; subgradient 0 at 0."""
    a = _wrap(a)
    sign = np.sign(a.values)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * sign

    return Tensor._result(np.abs(a.values), (a,), "abs", backward)


def huber(a, delta: float) -> Tensor:
    """Elementwise Huber penalty: x^2/2 inside |x| <= delta, linear outside."""
    if not delta > 0.0:
        raise ValueError(f"huber delta must be positive, got {delta}")
    a = _wrap(a)
    v = a.values
    small = np.abs(v) <= delta
    out = np.where(small, 0.5 * v * v, delta * (np.abs(v) - 0.5 * delta))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * np.clip(v, -delta, delta)

    return Tensor._result(out, (a,), "huber", backward)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only strictly inside the interval."""
    a = _wrap(a)
    v = a.values
    inside = (v > lo) & (v < hi)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * inside

    return Tensor._result(np.clip(v, lo, hi), (a,), "clamp", backward)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors in one graph node (left-to-right order)."""
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    ts = [_wrap(t) for t in tensors]
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n: shapes {shape} and {t.shape} differ")
    out = ts[0].values.copy()
    for t in ts[1:]:
        out += t.values

    def backward(g: np.ndarray) -> None:
        for t in ts:
            if t.requires_grad:
                t.grad += g

    return Tensor._result(out, ts, "add_n", backward)


def row(a: Tensor, i: int) -> Tensor:
    """Row i of a 2-D tensor as a 1-D tensor."""
    a = _wrap(a)
    if a.values.ndim != 2:
        raise ShapeError(f"row: expected 2-D tensor, got shape {a.shape}")
    m = a.shape[0]
    if not 0 <= i < m:
        raise IndexError(f"row index {i} out of range for {m} rows")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad[i] += g

    return Tensor._result(a.values[i].copy(), (a,), "row", backward)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """a[m,n] + b[n]: the one row-broadcast the models need."""
    a, b = _wrap(a), _wrap(b)
    if a.values.ndim != 2 or b.values.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {a.shape} and {b.shape} do not "
                         f"form matrix-plus-row")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g.sum(axis=0)

    return Tensor._result(a.values + b.values, (a, b), "add_bias", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    # Row-at-a-time keeps each output row bit-identical whether a batch is
    # forwarded whole or example by example (BLAS gemm blocking may not).
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    for r in range(a.shape[0]):
        out[r] = av[r] @ bv

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g @ bv.T
        if b.requires_grad:
            b.grad += av.T @ g

    return Tensor._result(out, (a, b), "matmul", backward)


def tensor_sum(a) -> Tensor:
    a = _wrap(a)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g  # scalar g broadcasts over a

    return Tensor._result(np.asarray(np.sum(a.values)), (a,), "sum", backward)


def tensor_mean(a) -> Tensor:
    a = _wrap(a)
    n = a.values.size
    if n == 0:
        raise ShapeError("mean of empty tensor")

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g / n

    return Tensor._result(np.asarray(np.sum(a.values) / n), (a,), "mean", backward)


def l2norm(a) -> Tensor:
    """Euclidean norm of all entries; gradient at the origin is the zero vector."""
    a = _wrap(a)
    if a.values.size == 0:
        raise ShapeError("l2norm of empty tensor")
    norm = float(np.sqrt(np.sum(a.values * a.values)))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            if norm > 0.0:
                a.grad += (g / norm) * a.values
            # norm == 0: subgradient choice is the zero vector

    return Tensor._result(np.asarray(norm), (a,), "l2norm", backward)


def dot(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.values.ndim != 1 or b.values.ndim != 1:
        raise ShapeError(f"dot: expected 1-D tensors, got {a.shape} and {b.shape}")
    if a.shape != b.shape:
        raise ShapeError(f"dot: lengths differ, {a.shape[0]} vs {b.shape[0]}")
    av, bv = a.values, b.values

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g * bv
        if b.requires_grad:
            b.grad += g * av

    return Tensor._result(np.asarray(np.dot(av, bv)), (a, b), "dot", backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits) at the true labels, max-stabilized."""
    logits = _wrap(logits)
    if logits.values.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    m, num_classes = logits.shape
    if m < 1:
        raise ShapeError("softmax_cross_entropy: empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (m,):
        raise ShapeError(f"softmax_cross_entropy: {m} rows but labels shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes}): "
                         f"min={labels.min()}, max={labels.max()}")
    log_p = _log_softmax(logits.values)
    loss = -np.sum(log_p[np.arange(m), labels]) / m
    probs = np.exp(log_p)

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            grad = probs.copy()
            grad[np.arange(m), labels] -= 1.0
            logits.grad += (float(g) / m) * grad

    return Tensor._result(np.asarray(loss), (logits,), "softmax_cross_entropy", backward)


def soft_target_kl(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """T^2-scaled mean KL(softmax(teacher/T) || softmax(student/T)).

    The teacher side is a constant (frozen-teacher contract); gradients flow
    only into the student logits.
    """
    if not temperature > 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    student_logits = _wrap(student_logits)
    t_values = teacher_logits.values if isinstance(teacher_logits, Tensor) \
        else np.asarray(teacher_logits, dtype=np.float64)
    if student_logits.shape != t_values.shape or student_logits.values.ndim != 2:
        raise ShapeError(f"soft_target_kl: logits shapes differ, "
                         f"{student_logits.shape} vs {t_values.shape}")
    m = student_logits.shape[0]
    temp = float(temperature)
    ls_student = _log_softmax(student_logits.values / temp)
    ls_teacher = _log_softmax(t_values / temp)
    p_teacher = np.exp(ls_teacher)
    kl = np.sum(p_teacher * (ls_teacher - ls_student), axis=1)
    loss = temp * temp * np.sum(kl) / m
    p_student = np.exp(ls_student)

    def backward(g: np.ndarray) -> None:
        if student_logits.requires_grad:
            student_logits.grad += (float(g) * temp / m) * (p_student - p_teacher)

    return Tensor._result(np.asarray(loss), (student_logits,), "soft_target_kl", backward)


def _topo_order(root: Tensor) -> list[Tensor]:
    # post-order over the requires_grad subgraph: parents precede each node
    if not root.requires_grad:
        return []
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from a scalar loss.

    Gradients of the reachable graph are reset first, so calling backward
    twice on the same graph produces identical results.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = np.zeros_like(node.values)
    if not order:
        return
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of ``x``.  The relative
    error denominator is max(|analytic|, |numeric|, 1e-12) per coordinate.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    probe = Tensor(x.values, requires_grad=True)
    loss = f(probe)
    backward(loss)
    analytic = probe.grad.copy().ravel()

    numeric = np.empty_like(analytic)
    flat = probe.values.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(probe).values)
        flat[i] = orig - eps
        f_minus = float(f(probe).values)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
