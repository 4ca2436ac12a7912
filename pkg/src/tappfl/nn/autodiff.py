"""Reverse-mode differentiation over matrix-valued nodes.

A :class:`GradTape` records every operation whose inputs depend on a
watched parameter. Ops accept either :class:`Node` objects or plain
arrays; when no input is tracked they just compute with numpy and return
an array, so the same functions serve graph building and plain numerics.

Only the compositions this package needs are provided: affine layers,
the three activations, row concatenation/rolling, fused softmax
cross-entropy, softplus, reductions and scalar arithmetic.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .tensor import ParamTensor


class TapeError(RuntimeError):
    """Misuse of a gradient tape (consumed tape, foreign node, non-scalar loss)."""


class Node:
    __slots__ = ("value", "grad", "tape", "parents", "backward_fn", "param")

    def __init__(self, value, tape=None, parents=(), backward_fn=None, param=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __float__(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape})"


class Gradients(dict):
    """Mapping ParamTensor -> gradient array (shaped like ``param.value``)."""

    def collect(self, params: Sequence[ParamTensor]) -> list[np.ndarray]:
        """Gradients for ``params`` in order, zeros for untouched entries."""
        return [self[p] if p in self else np.zeros(p.shape) for p in params]


class GradTape:
    """Records a computation so one scalar loss can be differentiated.

    A tape is single-use: after :meth:`backward` it refuses further
    recording or a second backward pass.
    """

    def __init__(self) -> None:
        self._nodes: list[Node] = []
        self._leaves: dict[int, Node] = {}
        self.consumed = False

    def watch(self, param: ParamTensor) -> Node:
        """Leaf node for a parameter; repeated calls return the same leaf."""
        self._check_open()
        key = id(param)
        leaf = self._leaves.get(key)
        if leaf is None:
            leaf = Node(param.value, self, param=param)
            self._leaves[key] = leaf
            self._nodes.append(leaf)
        return leaf

    def variable(self, array) -> Node:
        """Leaf for a non-parameter input; its gradient lands in ``node.grad``."""
        self._check_open()
        leaf = Node(np.asarray(array, dtype=np.float64), self)
        self._nodes.append(leaf)
        return leaf

    def _check_open(self) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by a backward pass; re-run the forward pass")

    def _record(self, node: Node) -> Node:
        self._check_open()
        self._nodes.append(node)
        return node

    def backward(self, loss: Node) -> Gradients:
        if not isinstance(loss, Node) or loss.tape is not self:
            raise TapeError("loss was not produced under this tape")
        self._check_open()
        if loss.value.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.value.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not isinstance(parent, Node) or parent.tape is None:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
        grads = Gradients()
        for leaf in self._leaves.values():
            grads[leaf.param] = leaf.grad if leaf.grad is not None else np.zeros(leaf.param.shape)
        return grads


def backward(tape: GradTape, loss: Node) -> Gradients:
    return tape.backward(loss)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape_of(inputs: Iterable) -> GradTape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Node) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("inputs recorded on different tapes")
    return tape


def _emit(value: np.ndarray, parents: tuple, backward_fn: Callable):
    tape = _tape_of(parents)
    if tape is None:
        return value
    return tape._record(Node(value, tape, parents, backward_fn))


def _tracked(x) -> bool:
    return isinstance(x, Node) and x.tape is not None


def detach(x):
    """Stop-gradient: same value, no path back to the inputs."""
    return Node(value_of(x))


def scale_grad(x, factor: float):
    """Identity forward; backward multiplies the gradient by ``factor``.

    ``factor < 0`` is a gradient-reversal layer. ``factor == 0`` cuts the
    path entirely so no signed zeros leak upstream.
    """
    if factor == 0:
        return detach(x)
    return _emit(value_of(x), (x,), lambda g: (g * factor,))


# -- elementwise arithmetic ------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def neg(a):
    return _emit(-value_of(a), (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv

    def back(g):
        ga = _unbroadcast(g * bv, av.shape) if _tracked(a) else None
        gb = _unbroadcast(g * av, bv.shape) if _tracked(b) else None
        return ga, gb

    return _emit(out, (a, b), back)


# -- dense layers ------------------------------------------------------------

def affine(x, weight, bias):
    """``x @ weight.T + bias`` for x [b, in], weight [out, in], bias [out]."""
    xv, wv, bv = value_of(x), value_of(weight), value_of(bias)
    out = xv @ wv.T + bv

    def back(g):
        gx = g @ wv if _tracked(x) else None
        gw = g.T @ xv if _tracked(weight) else None
        gb = g.sum(axis=0) if _tracked(bias) else None
        return gx, gw, gb

    return _emit(out, (x, weight, bias), back)


def relu(x):
    xv = value_of(x)
    mask = xv > 0
    return _emit(np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    s = expit(value_of(x))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def identity(x):
    return x


ACTIVATIONS: dict[str, Callable] = {"relu": relu, "sigmoid": sigmoid, "identity": identity}


# -- structural ops ------------------------------------------------------------

def concat(parts: Sequence, axis: int = 1):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) if _tracked(p) else None
            for k, p in enumerate(parts)
        )

    return _emit(out, tuple(parts), back)


def roll_rows(x, shift: int = -1):
    """Row ``j`` of the result is row ``(j - shift) mod b`` of ``x``."""
    out = np.roll(value_of(x), shift, axis=0)
    return _emit(out, (x,), lambda g: (np.roll(g, -shift, axis=0),))


def rows(x, start: int, stop: int):
    xv = value_of(x)

    def back(g):
        full = np.zeros_like(xv)
        full[start:stop] = g
        return (full,)

    return _emit(xv[start:stop], (x,), back)


# -- reductions and losses -------------------------------------------------------

def mean(x):
    xv = value_of(x)
    n = xv.size
    return _emit(np.asarray(xv.mean()), (x,), lambda g: (np.full(xv.shape, float(g) / n),))


def softplus_values(z: np.ndarray) -> np.ndarray:
    """Overflow-safe ``log(1 + exp(z))``."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def softplus(x):
    xv = value_of(x)
    return _emit(softplus_values(xv), (x,), lambda g: (g * expit(xv),))


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, targets: np.ndarray):
    """Mean over rows of ``-log softmax(logits)[j, targets[j]]``."""
    lv = value_of(logits)
    targets = np.asarray(targets, dtype=np.intp)
    b = lv.shape[0]
    logp = log_softmax_values(lv)
    out = np.asarray(-logp[np.arange(b), targets].mean())

    def back(g):
        grad = np.exp(logp)
        grad[np.arange(b), targets] -= 1.0
        return (grad * (float(g) / b),)

    return _emit(out, (logits,), back)
