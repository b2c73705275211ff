"""A minimal reverse-mode tape over the handful of array ops the encoder needs.

Nodes are appended to the tape in evaluation order (a Wengert list), so the
backward sweep is just the list reversed. Every op accepts arbitrary leading
batch dimensions and broadcasts like numpy; gradients flowing into a
broadcast operand are summed back to its shape.

A tape created with ``record=False`` evaluates the same ops without keeping
closures, which is how inference reuses the training forward pass.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

LN_EPS = 1e-5


class Node:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value: np.ndarray, requires_grad: bool = False):
        self.value = value
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Node, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    # -- leaves ----------------------------------------------------------------------------------

    def param(self, value: np.ndarray) -> Node:
        """A leaf whose gradient is wanted."""
        return Node(np.asarray(value), requires_grad=self.record)

    def const(self, value: np.ndarray) -> Node:
        return Node(np.asarray(value))

    # -- plumbing ----------------------------------------------------------------------------------

    def _emit(self, value, parents, backward) -> Node:
        out = Node(value)
        if self.record and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            self.nodes.append(out)
        return out

    @staticmethod
    def _accum(node: Node, g: np.ndarray) -> None:
        if not node.requires_grad:
            return
        g = _unbroadcast(g, node.value.shape)
        # never in-place: grads may alias forward values
        node.grad = g if node.grad is None else node.grad + g

    def backward(self, out: Node, seed: np.ndarray | None = None) -> None:
        if not out.requires_grad:
            return
        out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    # -- ops ---------------------------------------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        def back(g):
            self._accum(a, g)
            self._accum(b, g)

        return self._emit(a.value + b.value, (a, b), back)

    def scale(self, a: Node, c: float) -> Node:
        return self._emit(a.value * c, (a,), lambda g: self._accum(a, g * c))

    def mul_const(self, a: Node, m: np.ndarray) -> Node:
        """Elementwise product with a constant array (dropout masks)."""
        return self._emit(a.value * m, (a,), lambda g: self._accum(a, g * m))

    def matmul(self, a: Node, b: Node) -> Node:
        def back(g):
            if a.requires_grad:
                self._accum(a, g @ np.swapaxes(b.value, -1, -2))
            if b.requires_grad:
                self._accum(b, np.swapaxes(a.value, -1, -2) @ g)

        return self._emit(a.value @ b.value, (a, b), back)

    def reshape(self, a: Node, shape: tuple[int, ...]) -> Node:
        return self._emit(
            a.value.reshape(shape), (a,), lambda g: self._accum(a, g.reshape(a.value.shape))
        )

    def transpose(self, a: Node, axes: tuple[int, ...]) -> Node:
        inverse = tuple(np.argsort(axes))
        return self._emit(
            a.value.transpose(axes), (a,), lambda g: self._accum(a, g.transpose(inverse))
        )

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._emit(a.value * mask, (a,), lambda g: self._accum(a, g * mask))

    def softmax(self, a: Node) -> Node:
        """Softmax over the last axis."""
        z = a.value - a.value.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            self._accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

        return self._emit(y, (a,), back)

    def layer_norm(self, x: Node, gain: Node, bias: Node, eps: float = LN_EPS) -> Node:
        """Normalize the last axis to zero mean / unit variance, then scale and shift."""
        v = x.value
        mu = v.mean(axis=-1, keepdims=True)
        xc = v - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        n = v.shape[-1]

        def back(g):
            if gain.requires_grad:
                self._accum(gain, g * xhat)
            if bias.requires_grad:
                self._accum(bias, g)
            if x.requires_grad:
                gx = g * gain.value
                dx = inv / n * (
                    n * gx
                    - gx.sum(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
                )
                self._accum(x, dx)

        return self._emit(xhat * gain.value + bias.value, (x, gain, bias), back)

    def select(self, a: Node, index: int, axis: int) -> Node:
        def back(g):
            full = np.zeros_like(a.value)
            sl = [slice(None)] * a.value.ndim
            sl[axis] = index
            full[tuple(sl)] = g
            self._accum(a, full)

        return self._emit(np.take(a.value, index, axis=axis), (a,), back)

    def mean(self, a: Node, axis: int) -> Node:
        n = a.value.shape[axis]

        def back(g):
            self._accum(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape) / n)

        return self._emit(a.value.mean(axis=axis), (a,), back)

    def softmax_xent(self, logits: Node, mask: np.ndarray | None = None) -> Node:
        """Per-row ``-log softmax(logits)[..., 0]``, stabilized by max-subtraction.

        Entries where ``mask`` is False are treated as absent candidates.
        """
        z = logits.value
        if mask is not None:
            z = np.where(mask, z, -np.inf)
        zmax = z.max(axis=-1, keepdims=True)
        e = np.exp(z - zmax)
        total = e.sum(axis=-1, keepdims=True)
        lse = (zmax + np.log(total))[..., 0]
        p = e / total

        def back(g):
            d = p.copy()
            d[..., 0] -= 1.0
            self._accum(logits, g[..., None] * d)

        return self._emit(lse - z[..., 0], (logits,), back)
