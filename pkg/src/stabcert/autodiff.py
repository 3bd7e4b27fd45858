"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Var`` wraps a float64 ndarray and remembers how it was computed.
Calling :meth:`Var.backward` on a scalar propagates exact gradients to
every ``Var`` in the graph.  Only the primitives needed by the training
losses in this package are implemented.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Var", "constant"]


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Node in the computation graph: an ndarray value plus a pullback."""

    __slots__ = ("value", "grad", "_parents", "_pullback")

    def __init__(self, value, parents=(), pullback=None):
        self.value = _as_array(value)
        self.grad = None
        self._parents = tuple(parents)
        self._pullback = pullback

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable Var."""
        if self.value.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.value.shape}"
            )
        order = []
        seen = set()

        def visit(node):
            stack = [(node, iter(node._parents))]
            seen.add(id(node))
            while stack:
                cur, it = stack[-1]
                advanced = False
                for p in it:
                    if id(p) not in seen:
                        seen.add(id(p))
                        stack.append((p, iter(p._parents)))
                        advanced = True
                        break
                if not advanced:
                    order.append(cur)
                    stack.pop()

        visit(self)
        self._accumulate(np.ones_like(self.value))
        for node in reversed(order):
            if node._pullback is not None and node.grad is not None:
                node._pullback(node.grad)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Var) else Var(other)

        def pull(g):
            self._accumulate(_unbroadcast(g, self.value.shape))
            other._accumulate(_unbroadcast(g, other.value.shape))

        return Var(self.value + other.value, (self, other), pull)

    __radd__ = __add__

    def __neg__(self):
        def pull(g):
            self._accumulate(-g)

        return Var(-self.value, (self,), pull)

    def __sub__(self, other):
        other = other if isinstance(other, Var) else Var(other)
        return self + (-other)

    def __rsub__(self, other):
        return Var(other) + (-self)

    def __mul__(self, other):
        other = other if isinstance(other, Var) else Var(other)

        def pull(g):
            self._accumulate(_unbroadcast(g * other.value, self.value.shape))
            other._accumulate(_unbroadcast(g * self.value, other.value.shape))

        return Var(self.value * other.value, (self, other), pull)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = other if isinstance(other, Var) else Var(other)

        def pull(g):
            self._accumulate(_unbroadcast(g / other.value, self.value.shape))
            other._accumulate(
                _unbroadcast(-g * self.value / other.value**2, other.value.shape)
            )

        return Var(self.value / other.value, (self, other), pull)

    def __rtruediv__(self, other):
        return Var(other) / self

    @property
    def T(self) -> "Var":
        def pull(g):
            self._accumulate(g.T)

        return Var(self.value.T, (self,), pull)

    def matmul(self, other: "Var") -> "Var":
        other = other if isinstance(other, Var) else Var(other)

        def pull(g):
            self._accumulate(g @ other.value.T)
            other._accumulate(self.value.T @ g)

        return Var(self.value @ other.value, (self, other), pull)

    def __matmul__(self, other):
        return self.matmul(other)

    # -- elementwise nonlinearities --------------------------------------

    def relu(self) -> "Var":
        mask = self.value > 0.0  # subgradient at 0 is 0

        def pull(g):
            self._accumulate(g * mask)

        return Var(np.where(mask, self.value, 0.0), (self,), pull)

    def softplus(self) -> "Var":
        out = np.logaddexp(0.0, self.value)
        sig = 1.0 / (1.0 + np.exp(-self.value))

        def pull(g):
            self._accumulate(g * sig)

        return Var(out, (self,), pull)

    def exp(self) -> "Var":
        out = np.exp(self.value)

        def pull(g):
            self._accumulate(g * out)

        return Var(out, (self,), pull)

    def square(self) -> "Var":
        def pull(g):
            self._accumulate(g * 2.0 * self.value)

        return Var(self.value**2, (self,), pull)

    def abs(self) -> "Var":
        sign = np.sign(self.value)  # subgradient at 0 is 0

        def pull(g):
            self._accumulate(g * sign)

        return Var(np.abs(self.value), (self,), pull)

    def clip(self, lo: float, hi: float) -> "Var":
        mask = (self.value >= lo) & (self.value <= hi)

        def pull(g):
            self._accumulate(g * mask)

        return Var(np.clip(self.value, lo, hi), (self,), pull)

    def minimum(self, other: "Var") -> "Var":
        other = other if isinstance(other, Var) else Var(other)
        take_self = self.value <= other.value  # ties go to the left argument

        def pull(g):
            self._accumulate(_unbroadcast(g * take_self, self.value.shape))
            other._accumulate(_unbroadcast(g * ~take_self, other.value.shape))

        return Var(np.minimum(self.value, other.value), (self, other), pull)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None) -> "Var":
        shape = self.value.shape

        def pull(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape).copy())
            else:
                self._accumulate(np.broadcast_to(np.expand_dims(g, axis), shape).copy())

        return Var(self.value.sum(axis=axis), (self,), pull)

    def mean(self, axis=None) -> "Var":
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def max(self) -> "Var":
        """Maximum over all entries; subgradient goes to the first argmax."""
        idx = np.unravel_index(np.argmax(self.value), self.value.shape)

        def pull(g):
            full = np.zeros_like(self.value)
            full[idx] = g
            self._accumulate(full)

        return Var(self.value[idx], (self,), pull)

    def segment_mean(self, segment_ids: np.ndarray, num_segments: int) -> "Var":
        """Mean of 1-d entries grouped by ``segment_ids``.

        Every segment in ``[0, num_segments)`` must be non-empty.
        """
        if self.value.ndim != 1:
            raise ValueError("segment_mean expects a 1-d Var")
        counts = np.bincount(segment_ids, minlength=num_segments).astype(np.float64)
        if np.any(counts == 0):
            raise ValueError("segment_mean requires non-empty segments")
        totals = np.bincount(segment_ids, weights=self.value, minlength=num_segments)

        def pull(g):
            self._accumulate(g[segment_ids] / counts[segment_ids])

        return Var(totals / counts, (self,), pull)


def constant(x) -> Var:
    """Lift an array into the graph with no gradient tracking of its own."""
    return Var(x)
