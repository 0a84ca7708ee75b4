"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` (entered
with ``with Tape() as tape:``) whenever at least one input requires a
gradient. Outside a tape every op is a plain forward computation, which is
what evaluation code uses.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from scenebias.errors import ConfigError, ContractError, DimensionError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar; every operator routes through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable tensor carrying its own SGD momentum buffer."""

    __slots__ = ("name", "momentum_buffer")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={list(self.shape)})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of the operations executed while the tape is active."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)


class no_grad:
    """Suspend recording inside the block, even within an active tape."""

    def __enter__(self) -> None:
        _tape_stack().append(None)

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    stack = _tape_stack()
    if needs and stack and stack[-1] is not None:
        out.requires_grad = True
        stack[-1].record(Node(inputs, out, backward_fn, op))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {list(a.shape)} and {list(b.shape)}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {list(a.shape)} and {list(b.shape)}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    active = x.data > 0
    out = np.where(active, x.data, 0.0)
    return _result(out, (x,), lambda g: (g * active,), "relu")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    if np.ndim(out) == 0:
        out = np.reshape(out, (1,))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), x.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, x.shape).copy(),)

    return _result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[ax] for ax in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {list(x.shape)} to {list(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[i, index[i]]`` for every row of a rank-2 tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"take needs [B x K] and [B] indices, got {list(x.shape)} and {list(index.shape)}")
    rows = np.arange(x.shape[0])
    out = x.data[rows, index]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _result(out, (x,), backward, "take")


# ---------------------------------------------------------------------------
# model ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {list(a.shape)} x {list(b.shape)}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(out, (a, b), backward, "matmul")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation plus per-channel bias.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; kernels are
    ``[C_out, C_in, kh, kw]``.
    """
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] or [B,C,H,W] input and 4-d kernels, got {list(x.shape)} and {list(kernels.shape)}")
    xs = x.data if batched else x.data[None]
    _, c_in, h, w = xs.shape
    c_out, k_in, kh, kw = kernels.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {list(x.shape)}, kernels {list(kernels.shape)}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias must have shape [{c_out}], got {list(bias.shape)}")
    ho, wo = h - kh + 1, w - kw + 1
    windows = sliding_window_view(xs, (kh, kw), axis=(2, 3))  # [B, C, Ho, Wo, kh, kw]
    out = np.tensordot(windows, kernels.data, axes=([1, 4, 5], [1, 2, 3]))  # [B, Ho, Wo, O]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]
    if not batched:
        out = out[0]

    def backward(g):
        gb = g if batched else g[None]
        gk = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))
        gx = np.zeros_like(xs)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho, j:j + wo] += np.tensordot(kernels.data[:, :, i, j], gb, axes=([0], [1])).transpose(1, 0, 2, 3)
        return (gx if batched else gx[0]), gk, gb.sum(axis=(0, 2, 3))

    return _result(out, (x, kernels, bias), backward, "conv2d")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax along ``axis`` (max is subtracted first)."""
    z = logits.data
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty tensor")
    shifted = z - z.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (logits,), backward, "log_softmax")


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; multiplies the upstream gradient by ``-lam`` backward."""
    if not lam >= 0:
        raise ConfigError(f"gradient reversal strength must be >= 0, got {lam}")
    scale = -float(lam)
    return _result(x.data.copy(), (x,), lambda g: (scale * g,), "grad_reverse")


# ---------------------------------------------------------------------------
# differentiation and optimisation


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf reached on ``tape``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def sgd_step(params: Sequence[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """Momentum SGD: ``buf = m*buf + grad + wd*p``; ``p -= lr*buf``; grads are cleared."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ConfigError(f"weight decay must be >= 0, got {weight_decay}")
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p.name!r} has no gradient")
    for p in params:
        buf = momentum * p.momentum_buffer + p.grad
        if weight_decay:
            buf = buf + weight_decay * p.data
        p.momentum_buffer = buf
        p.data = p.data - lr * buf
        p.grad = None


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)

    def value(arr):
        r = f(Tensor(arr.reshape(base.shape)))
        return r.item() if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += eps
        minus = flat.copy()
        minus[i] -= eps
        out[i] = (value(plus) - value(minus)) / (2 * eps)
    return Tensor(out.reshape(base.shape))
