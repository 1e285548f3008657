"""Minimal eager reverse-mode differentiation on float64 arrays.

A :class:`Tape` records each operation as it executes, so values are
available immediately and gradients come from a single reverse pass.
The primitive set is deliberately small: exactly what the losses in
this package need. Anything unusual (spectral entropy terms, risk
gradient statistics) enters through :func:`register_custom`, which
wraps a matrix-to-scalar function and its hand-written gradient as a
first-class tape operation.

All node values are float64; inputs are converted on entry so that
accumulation error stays at machine precision for the matrix sizes
used here.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np


class Node:
    """One recorded value on the tape."""

    __slots__ = ("value", "adjoint", "parents", "backward_rule", "name")

    def __init__(self, value, parents=(), backward_rule=None, name=""):
        self.value = value
        self.adjoint = np.zeros_like(value)
        self.parents = parents
        self.backward_rule = backward_rule
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        label = self.name or "node"
        return f"Node({label}, shape={self.value.shape})"


@dataclass(frozen=True)
class CustomOp:
    """A matrix-to-scalar function with a hand-written gradient."""

    name: str
    forward: Callable[[np.ndarray], float]
    backward: Callable[[np.ndarray], np.ndarray]


def register_custom(forward, backward, name="custom") -> CustomOp:
    """Package a forward/backward pair for use with :meth:`Tape.custom`.

    ``forward`` maps a 2-d array to a float; ``backward`` maps the same
    array to the gradient of that float with respect to every entry,
    with identical shape. The shape contract is enforced when the
    reverse pass first invokes ``backward``.
    """
    return CustomOp(name=name, forward=forward, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # Reduce a broadcast gradient back to the parent's shape.
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Eager computation graph with reverse-mode gradients.

    Operations append nodes in execution order, so parents always
    precede children and one reversed walk propagates adjoints.
    ``backward`` zeroes every adjoint before seeding, which makes
    repeated calls on the same node idempotent.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, value, parents=(), backward_rule=None, name="") -> Node:
        node = Node(np.asarray(value, dtype=np.float64), parents, backward_rule, name)
        self.nodes.append(node)
        return node

    def input(self, value, name="input") -> Node:
        """Register a leaf whose adjoint will hold the gradient."""
        return self._record(value, name=name)

    # -- primitives ----------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.ndim != 2 or b.value.ndim != 2:
            raise ValueError("matmul expects 2-d operands")
        if a.value.shape[1] != b.value.shape[0]:
            raise ValueError(
                f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}"
            )
        out = self._record(a.value @ b.value, (a, b), name="matmul")

        def rule():
            a.adjoint += out.adjoint @ b.value.T
            b.adjoint += a.value.T @ out.adjoint

        out.backward_rule = rule
        return out

    def add(self, a: Node, b: Node) -> Node:
        try:
            np.broadcast_shapes(a.value.shape, b.value.shape)
        except ValueError:
            raise ValueError(
                f"add shape mismatch: {a.value.shape} + {b.value.shape}"
            ) from None
        out = self._record(a.value + b.value, (a, b), name="add")

        def rule():
            a.adjoint += _unbroadcast(out.adjoint, a.value.shape)
            b.adjoint += _unbroadcast(out.adjoint, b.value.shape)

        out.backward_rule = rule
        return out

    def tanh(self, a: Node) -> Node:
        out = self._record(np.tanh(a.value), (a,), name="tanh")

        def rule():
            a.adjoint += (1.0 - out.value**2) * out.adjoint

        out.backward_rule = rule
        return out

    def relu(self, a: Node) -> Node:
        out = self._record(np.maximum(a.value, 0.0), (a,), name="relu")

        def rule():
            a.adjoint += (a.value > 0.0) * out.adjoint

        out.backward_rule = rule
        return out

    def scale(self, a: Node, factor: float) -> Node:
        c = float(factor)
        out = self._record(a.value * c, (a,), name="scale")

        def rule():
            a.adjoint += c * out.adjoint

        out.backward_rule = rule
        return out

    def square(self, a: Node) -> Node:
        out = self._record(a.value**2, (a,), name="square")

        def rule():
            a.adjoint += 2.0 * a.value * out.adjoint

        out.backward_rule = rule
        return out

    def sum(self, a: Node, weights: np.ndarray | None = None) -> Node:
        """Sum of all entries, optionally weighted by a constant array."""
        if weights is None:
            out = self._record(a.value.sum(), (a,), name="sum")

            def rule():
                a.adjoint += out.adjoint

        else:
            w = np.asarray(weights, dtype=np.float64)
            if w.shape != a.value.shape:
                raise ValueError(
                    f"weight shape {w.shape} does not match value shape {a.value.shape}"
                )
            out = self._record((w * a.value).sum(), (a,), name="wsum")

            def rule():
                a.adjoint += w * out.adjoint

        out.backward_rule = rule
        return out

    def softmax_cross_entropy(self, logits: Node, labels: np.ndarray) -> Node:
        """Per-sample cross entropy of softmax(logits) against integer labels.

        Returns a vector of length n; reduce it with :meth:`sum` (plain
        or weighted) to build a risk term.
        """
        z = logits.value
        if z.ndim != 2:
            raise ValueError("logits must be 2-d (samples, classes)")
        y = np.asarray(labels)
        if y.ndim != 1 or y.shape[0] != z.shape[0]:
            raise ValueError("labels must be one integer per logits row")
        if not np.issubdtype(y.dtype, np.integer):
            raise ValueError("labels must be integers")
        if y.min(initial=0) < 0 or y.max(initial=0) >= z.shape[1]:
            raise ValueError("label id outside class range")
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        losses = lse - z[np.arange(z.shape[0]), y]
        out = self._record(losses, (logits,), name="softmax_ce")
        probs = np.exp(z - lse[:, None])

        def rule():
            grad = probs.copy()
            grad[np.arange(z.shape[0]), y] -= 1.0
            logits.adjoint += out.adjoint[:, None] * grad

        out.backward_rule = rule
        return out

    def custom(self, op: CustomOp, a: Node) -> Node:
        """Apply a registered matrix-to-scalar op as a tape node."""
        if a.value.ndim != 2:
            raise ValueError(f"custom op {op.name!r} expects a 2-d operand")
        y = float(op.forward(a.value))
        out = self._record(y, (a,), name=op.name)

        def rule():
            grad = np.asarray(op.backward(a.value), dtype=np.float64)
            if grad.shape != a.value.shape:
                raise ValueError(
                    f"custom op {op.name!r} backward returned shape "
                    f"{grad.shape}, expected {a.value.shape}"
                )
            a.adjoint += float(out.adjoint) * grad

        out.backward_rule = rule
        return out

    # -- reverse pass ---------------------------------------------------

    def backward(self, node: Node) -> None:
        """Propagate d(node)/d(leaf) into every leaf adjoint.

        ``node`` must be scalar. Adjoints are reset first, so calling
        twice gives identical values rather than doubled ones.
        """
        if node.value.shape != ():
            raise ValueError(f"backward target must be scalar, got {node.value.shape}")
        if not any(n is node for n in self.nodes):
            raise ValueError("node does not belong to this tape")
        for n in self.nodes:
            n.adjoint = np.zeros_like(n.value)
        node.adjoint = np.ones_like(node.value)
        seen_target = False
        for n in reversed(self.nodes):
            if n is node:
                seen_target = True
            if seen_target and n.backward_rule is not None:
                n.backward_rule()


@dataclass(frozen=True)
class GradientCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    max_rel_error: float
    per_input: dict
    step: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def gradient_check(build_loss, params, step=1e-4, tolerance=1e-4) -> GradientCheckReport:
    """Compare tape gradients of a scalar loss with central differences.

    ``build_loss(tape, nodes)`` must construct and return a scalar loss
    node from the dict of input nodes; it is re-invoked on perturbed
    copies of ``params`` to form the finite-difference estimate
    ``(L(x + h) - L(x - h)) / (2 h)`` entry by entry. The relative
    error per input is ``max|ad - fd| / max(max|ad|, max|fd|, 1e-12)``.
    """
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    nodes = {k: tape.input(v.copy(), name=k) for k, v in arrays.items()}
    loss = build_loss(tape, nodes)
    tape.backward(loss)
    analytic = {k: nodes[k].adjoint.copy() for k in arrays}

    def value_at(perturbed):
        t = Tape()
        ns = {k: t.input(v.copy(), name=k) for k, v in perturbed.items()}
        return float(build_loss(t, ns).value)

    per_input = {}
    worst = 0.0
    for key, base in arrays.items():
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            bumped = dict(arrays)
            plus = base.copy()
            plus[idx] += step
            bumped[key] = plus
            up = value_at(bumped)
            minus = base.copy()
            minus[idx] -= step
            bumped[key] = minus
            down = value_at(bumped)
            fd[idx] = (up - down) / (2.0 * step)
        denom = max(np.max(np.abs(analytic[key]), initial=0.0),
                    np.max(np.abs(fd), initial=0.0), 1e-12)
        rel = float(np.max(np.abs(analytic[key] - fd), initial=0.0) / denom)
        per_input[key] = rel
        worst = max(worst, rel)
    return GradientCheckReport(
        max_rel_error=worst, per_input=per_input, step=step, tolerance=tolerance
    )
