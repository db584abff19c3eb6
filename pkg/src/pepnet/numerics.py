"""Small reverse-mode autodiff over float64 numpy arrays.

Every op takes and returns :class:`Node` objects. Values are 2-D ``[batch, width]``
arrays for everything the model builds, but nothing here requires that except
``matmul``. Gradients accumulate with ``+=`` until :func:`zero_grad` is called,
so a parameter used by several towers or gates receives the sum of all paths.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

BCE_EPS = 1e-12
_SIGMOID_HI = np.nextafter(1.0, 0.0)
_SIGMOID_LO = np.finfo(np.float64).tiny


class DimensionError(ValueError):
    pass


class Node:
    __slots__ = ("value", "_grad", "op", "parents", "requires_grad", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None  # allocated on first accumulation
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward = backward
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = np.asarray(g, dtype=np.float64)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"


def constant(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def _make(value, op: str, parents: tuple, backward: Callable) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=needs, op=op, parents=parents,
                backward=backward if needs else None)


def _accum(node: Node, g: np.ndarray, fresh: bool = False) -> None:
    """Add ``g`` into ``node``'s gradient; ``fresh`` arrays may be adopted without a copy."""
    if not node.requires_grad:
        return
    if node._grad is None:
        if fresh and g.shape == node.value.shape and g.dtype == np.float64:
            node._grad = g
        else:
            node._grad = np.array(np.broadcast_to(g, node.value.shape), dtype=np.float64)
    else:
        node._grad += g


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(out: Node) -> None:
        g = out.grad
        _accum(a, g @ b.value.T, fresh=True)
        _accum(b, a.value.T @ g, fresh=True)

    return _make(a.value @ b.value, "matmul", (a, b), backward)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may be a row vector broadcast over ``a``'s batch axis."""
    if a.shape != b.shape and not (b.value.ndim == 1 and a.shape[-1:] == b.shape) \
            and not (b.value.ndim == 2 and b.shape[0] == 1 and a.shape[1:] == b.shape[1:]):
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")

    def backward(out: Node) -> None:
        g = out.grad
        _accum(a, g)
        if b.requires_grad:
            _accum(b, g if b.shape == g.shape else g.reshape(-1, *b.shape).sum(axis=0))

    return _make(a.value + b.value, "add", (a, b), backward)


def linear(x: Node, w: Node, b: Node) -> Node:
    return add(matmul(x, w), b)


def relu(x: Node) -> Node:
    mask = x.value > 0

    def backward(out: Node) -> None:
        _accum(x, out.grad * mask, fresh=True)

    return _make(np.where(mask, x.value, 0.0), "relu", (x,), backward)


def _sigmoid_array(v: np.ndarray) -> np.ndarray:
    # keep the open interval even where exp saturates
    return np.clip(expit(v), _SIGMOID_LO, _SIGMOID_HI)


def sigmoid(x: Node) -> Node:
    s = _sigmoid_array(x.value)

    def backward(out: Node) -> None:
        _accum(x, out.grad * s * (1.0 - s), fresh=True)

    return _make(s, "sigmoid", (x,), backward)


def scale(x: Node, c: float) -> Node:
    def backward(out: Node) -> None:
        _accum(x, out.grad * c, fresh=True)

    return _make(x.value * c, "scale", (x,), backward)


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(out: Node) -> None:
        g = out.grad
        _accum(a, g * b.value, fresh=True)
        _accum(b, g * a.value, fresh=True)

    return _make(a.value * b.value, "mul", (a, b), backward)


elementwise_mul = mul


def concat(parts: Sequence[Node]) -> Node:
    """Concatenate along the last axis."""
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of an empty list")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(f"concat shape mismatch: {[q.shape for q in parts]}")
    if len(parts) == 1:
        return parts[0]
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(out: Node) -> None:
        g = out.grad
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _accum(p, g[..., lo:hi])

    return _make(np.concatenate([p.value for p in parts], axis=-1), "concat", tuple(parts), backward)


def split(x: Node, widths: Sequence[int]) -> list[Node]:
    widths = [int(w) for w in widths]
    if any(w <= 0 for w in widths) or sum(widths) != x.shape[-1]:
        raise DimensionError(f"split widths {widths} do not sum to last dimension of {x.shape}")
    if len(widths) == 1:
        return [x]
    bounds = np.cumsum([0] + widths)
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        def backward(out: Node, lo=lo, hi=hi) -> None:
            if x.requires_grad:
                x.grad[..., lo:hi] += out.grad
        outs.append(_make(x.value[..., lo:hi].copy(), "split", (x,), backward))
    return outs


def stop_gradient(x: Node) -> Node:
    # no parents: nothing flows back through this edge
    return Node(x.value, requires_grad=False, op="stop_gradient")


def sum_all(x: Node) -> Node:
    def backward(out: Node) -> None:
        _accum(x, np.broadcast_to(out.grad, x.shape))

    return _make(np.array(x.value.sum()), "sum", (x,), backward)


def softmax(x: Node) -> Node:
    """Row-wise softmax over the last axis."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(out: Node) -> None:
        g = out.grad
        _accum(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, "softmax", (x,), backward)


def bce_loss(pred: Node, label) -> Node:
    """Mean binary cross-entropy. Predictions are clamped to [1e-12, 1-1e-12]."""
    y = np.asarray(label, dtype=np.float64)
    if y.shape != pred.shape:
        raise DimensionError(f"bce_loss shape mismatch: {pred.shape} vs {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("bce_loss labels must be 0 or 1")
    p = np.clip(pred.value, BCE_EPS, 1.0 - BCE_EPS)
    n = y.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))

    def backward(out: Node) -> None:
        # straight-through at the clamp so saturated outputs still learn
        _accum(pred, out.grad * (p - y) / (p * (1.0 - p)) / n)

    return _make(np.array(max(loss, 0.0)), "bce", (pred,), backward)


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    if loss.value.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad += 1.0
    for node in reversed(_topo_order(loss)):
        # nodes no gradient reached contribute nothing
        if node._backward is not None and node._grad is not None:
            node._backward(node)


def zero_grad(nodes: Iterable[Node]) -> None:
    for n in nodes:
        n._grad = None


def finite_diff_check(f: Callable[[], Node], params: Sequence[np.ndarray],
                      grads: Sequence[np.ndarray], step: float = 1e-5) -> float:
    """Max of |analytic - central difference| / max(1, |central difference|).

    ``f`` rebuilds the graph from the current contents of ``params``, which are
    perturbed in place one entry at a time and restored afterwards.
    """
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().value)
            flat[i] = orig - step
            down = float(f().value)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("non-finite value during finite differences")
            num = (up - down) / (2.0 * step)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return worst


def gradient_check(build: Callable[[dict[str, Node]], Node], arrays: dict[str, np.ndarray],
                   step: float = 1e-5) -> float:
    """Convenience wrapper: wrap ``arrays`` as leaves, backprop once, compare to finite differences."""
    leaves = {k: parameter(v, name=k) for k, v in arrays.items()}
    backward(build(leaves))
    analytic = [leaves[k].grad.copy() for k in arrays]

    def f() -> Node:
        return build({k: constant(v) for k, v in arrays.items()})

    return finite_diff_check(f, list(arrays.values()), analytic, step=step)
