"""Dense float64 tensors with hand-written reverse-mode gradients.

A Tensor wraps a numpy array plus an optional gradient buffer. Each
differentiable operation returns a new Tensor that remembers its parents and
a closure applying the chain rule; calling ``backward()`` on a scalar result
replays the closures in reverse topological order. The op set is
deliberately small: exactly what the two classifier architectures need.

Every backward rule is verified numerically against central finite
differences (``grad_check``) rather than trusted, so keep new rules simple
and add them to the gradient test suite.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeMismatch",
    "Tensor",
    "Rng",
    "make_op",
    "accumulate_grad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "transpose",
    "transpose_last2",
    "reshape",
    "concat_lastdim",
    "slice_lastdim",
    "softmax_rows",
    "sum_all",
    "mean_all",
    "grad_check",
]


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """N-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(ancestor) into every ancestor's ``grad``."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        # Iterative DFS post-order; recursion would cap the graph depth.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar so tests and layers read naturally.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other) -> "Tensor":
        return add(self, _coerce(other))

    def __radd__(self, other) -> "Tensor":
        return add(_coerce(other), self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, _coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return sub(_coerce(other), self)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _coerce(other))

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return neg(self)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def make_op(data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    """Assemble an op result node; detaches itself when no parent needs grads."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``; custom ops call this from their backward."""
    if not t.requires_grad:
        return
    # Non-inplace add: g may be a view into another node's grad buffer.
    t.grad = g if t.grad is None else t.grad + g


_accumulate = accumulate_grad


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product; leading dims broadcast, last two contract."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dims disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"leading dims do not broadcast: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return make_op(data, (a, b), backward)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"shapes do not broadcast: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return make_op(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    data = a.data - b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return make_op(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make_op(data, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    data = x.data * factor

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * factor)

    return make_op(data, (x,), backward)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def relu(x: Tensor) -> Tensor:
    """max(0, x); subgradient at exactly 0 is taken as 0. NaN propagates."""
    mask = x.data > 0
    data = np.maximum(x.data, 0.0)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return make_op(data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch(f"bad permutation {axes} for ndim {x.ndim}")
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.transpose(inverse))

    return make_op(data, (x,), backward)


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeMismatch("transpose_last2 needs ndim >= 2")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.shape))

    return make_op(data, (x,), backward)


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat_lastdim needs at least one tensor")
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise ShapeMismatch("concat_lastdim operands differ in leading dims")
    widths = [p.shape[-1] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=-1)

    def backward(g: np.ndarray) -> None:
        offset = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[..., offset:offset + w])
            offset += w

    return make_op(data, tuple(parts), backward)


def slice_lastdim(x: Tensor, start: int, stop: int) -> Tensor:
    width = x.shape[-1]
    if not (0 <= start < stop <= width):
        raise ShapeMismatch(f"slice [{start}:{stop}] out of range for width {width}")
    data = np.ascontiguousarray(x.data[..., start:stop])

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        _accumulate(x, full)

    return make_op(data, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, y * (g - inner))

    return make_op(y, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    data = np.array(x.data.sum())

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.full(x.shape, float(g)))

    return make_op(data, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    data = np.array(x.data.mean())

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.full(x.shape, float(g) / n))

    return make_op(data, (x,), backward)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a pure scalar function of ``x.data`` (it may capture other
    constant tensors). When ``max_coords`` is given and the tensor is larger,
    a seeded random subset of coordinates is probed instead of all of them.
    The relative error per coordinate is
    ``|analytic - central| / max(1e-8, |analytic| + |central|)``.
    """
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    if x.grad is None:
        raise ValueError("f does not depend on x")
    analytic = x.grad.reshape(-1).copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and n > max_coords:
        idxs = Rng.derive(seed, 0x6FD).choice(n, size=max_coords)
    else:
        idxs = np.arange(n)

    worst = 0.0
    for i in idxs:
        original = flat[i]
        flat[i] = original + eps
        f_plus = float(f(x).data)
        flat[i] = original - eps
        f_minus = float(f(x).data)
        flat[i] = original
        central = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[i]
        rel = abs(a - central) / max(1e-8, abs(a) + abs(central))
        worst = max(worst, rel)
    return worst


class Rng:
    """Counter-based random source (Philox) with platform-stable streams."""

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    @classmethod
    def derive(cls, seed: int, *key: int) -> "Rng":
        """Independent stream addressed by (seed, *key); same address, same stream."""
        return cls(seed, _key=key)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
