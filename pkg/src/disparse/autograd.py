"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in order;
:func:`backward` replays them in reverse.  Outside a tape the same functions
just compute values, which is what evaluation code uses.

The primitive set is deliberately small: matmul, broadcasting add/mul, relu,
tanh, sum/mean and four losses (softmax cross-entropy, MSE, L1, cosine).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "Tensor",
    "Tape",
    "forward",
    "backward",
    "matmul",
    "add",
    "mul",
    "relu",
    "tanh",
    "sum",
    "mean",
    "softmax_cross_entropy",
    "mse_loss",
    "l1_loss",
    "cosine_loss",
]


class ShapeError(ValueError):
    """Operand shapes do not fit the primitive they were passed to."""

    def __init__(self, primitive: str, message: str):
        super().__init__(f"{primitive}: {message}")
        self.primitive = primitive


class NonFiniteError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot.

    ``grad`` is only ever populated for tensors created with
    ``requires_grad=True``; intermediate results never hold gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(extent <= 0 for extent in arr.shape):
            raise ShapeError("tensor", f"extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        # True when some requires_grad leaf feeds into this value.
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # Maps the output cotangent to one cotangent per input.
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of the primitives executed inside ``with tape:``."""

    nodes: list[Node] = field(default_factory=list)
    output: Tensor | None = None

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, seed=None, target: Tensor | None = None) -> None:
        backward(self, seed, target=target)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._tracked = any(t._tracked for t in inputs)
    tape = _active_tape()
    if tape is not None and out._tracked:
        tape.record(Node(op, tuple(inputs), out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


# -- primitives ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul", f"expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit("matmul", (a, b), ad @ bd, vjp)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit("add", (a, b), a.data + b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", (a, b), ad * bd, vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    active = a.data > 0

    def vjp(g):
        return (g * active,)

    return _emit("relu", (a,), np.where(active, a.data, 0.0), vjp)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _emit("tanh", (a,), out, vjp)


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), np.asarray(a.data.sum()), vjp)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size

    def vjp(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _emit("mean", (a,), np.asarray(a.data.mean()), vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy", f"logits must be 2-d, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(
            "softmax_cross_entropy",
            f"expected {logits.shape[0]} labels, got shape {labels.shape}",
        )
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ShapeError("softmax_cross_entropy", f"labels outside [0, {c})")
    idx = labels.astype(np.int64)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(n), idx].mean()

    def vjp(g):
        d = np.exp(log_p)
        d[np.arange(n), idx] -= 1.0
        return (d * (g / n),)

    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss), vjp)


def _check_same(op: str, pred: Tensor, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeError(op, f"prediction {pred.shape} vs target {target.shape}")


def mse_loss(pred, target) -> Tensor:
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    _check_same("mse_loss", pred, target)
    diff = pred.data - target
    n = diff.size

    def vjp(g):
        return (g * 2.0 * diff / n,)

    return _emit("mse_loss", (pred,), np.asarray((diff * diff).mean()), vjp)


def l1_loss(pred, target) -> Tensor:
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    _check_same("l1_loss", pred, target)
    diff = pred.data - target
    n = diff.size

    def vjp(g):
        return (g * np.sign(diff) / n,)

    return _emit("l1_loss", (pred,), np.asarray(np.abs(diff).mean()), vjp)


def cosine_loss(pred, target, eps: float = 1e-12) -> Tensor:
    """Mean over rows of ``1 - cos(pred_i, target_i)``."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    _check_same("cosine_loss", pred, target)
    if pred.data.ndim != 2:
        raise ShapeError("cosine_loss", f"expects 2-d rows, got {pred.shape}")
    p = pred.data
    pn = np.sqrt((p * p).sum(axis=1, keepdims=True)) + eps
    tn = np.sqrt((target * target).sum(axis=1, keepdims=True)) + eps
    that = target / tn
    cos = (p * that).sum(axis=1, keepdims=True) / pn
    n = p.shape[0]

    def vjp(g):
        # d cos / d p = that / |p| - cos * p / |p|^2
        d = that / pn - cos * p / (pn * pn)
        return (-(g / n) * d,)

    return _emit("cosine_loss", (pred,), np.asarray(1.0 - cos.mean()), vjp)


# -- driving the tape ---------------------------------------------------------


def forward(fn: Callable[..., Tensor], *inputs) -> tuple[Tensor, Tape]:
    """Evaluate ``fn(*inputs)`` while recording every primitive on a new tape."""
    tape = Tape()
    with tape:
        out = fn(*inputs)
    if not isinstance(out, Tensor):
        raise TypeError(f"model function returned {type(out).__name__}, expected Tensor")
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("forward pass produced non-finite values")
    tape.output = out
    return out, tape


def backward(tape: Tape, seed=None, target: Tensor | None = None) -> None:
    """Accumulate d(seed . target)/d(leaf) into ``leaf.grad`` for every leaf
    that requires a gradient.

    ``target`` defaults to the tape's final output; any tensor recorded on the
    tape may be used instead (e.g. one task's loss out of a multitask forward).
    """
    if tape.output is None:
        raise TapeError("backward called before forward completed")
    target = tape.output if target is None else target
    if seed is None:
        seed = np.ones(target.shape)
    seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
    if seed.shape != target.shape:
        raise ShapeError("backward", f"seed shape {seed.shape} != output shape {target.shape}")

    cotangents: dict[int, np.ndarray] = {id(target): seed}
    leaves: dict[int, Tensor] = {}
    if target.requires_grad:
        leaves[id(target)] = target
    for node in reversed(tape.nodes):
        g = cotangents.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp._tracked:
                continue
            key = id(inp)
            if key in cotangents:
                cotangents[key] = cotangents[key] + gi
            else:
                cotangents[key] = gi
            if inp.requires_grad:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = cotangents.get(key)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {leaf!r}")
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
