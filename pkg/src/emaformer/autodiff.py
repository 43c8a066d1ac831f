"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. With no tape active they run as plain
numpy calls, which is how inference is done.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = mul(x, x)
    ...     loss = mean_reduce(y)
    >>> backward(loss, tape)
    >>> float(x.grad[0])
    6.0

Shapes never broadcast, except for last-axis affine terms (``add_bias``,
``layer_norm``) and a rank-2 right operand of ``matmul`` shared across a
batch.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MAX_RANK = 3
BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    """A float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds {MAX_RANK} (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; tapes nest per thread. A tape can be
    differentiated exactly once.
    """

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape.records.append(_Record(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> list[Tensor]:
    """Propagate d(loss) back through ``tape``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``; the list
    of leaves that received a gradient is returned.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape was already differentiated; record a new one")
    tape.consumed = True
    if not loss.requires_grad:
        return []

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {}
    if loss._leaf:
        _accumulate_leaf(loss, pending.pop(id(loss)), touched)
    for rec in reversed(tape.records):
        g = pending.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                _accumulate_leaf(inp, gi, touched)
            else:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
    return list(touched.values())


def _accumulate_leaf(t: Tensor, g: np.ndarray, touched: dict[int, Tensor]) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g
    touched[id(t)] = t


def no_grad_value(t: Tensor) -> Tensor:
    """Detached copy (shares no tape history)."""
    return Tensor(t.data.copy())


# ---------------------------------------------------------------------------
# elementwise


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with ``b`` broadcast along the last axis."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _emit("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=lead)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit("tanh", (x,), t, lambda g: (g * (1.0 - t * t),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and reshaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supports ``[m,k]@[k,n]``, ``[B,m,k]@[k,n]`` (shared right operand) and
    ``[B,m,k]@[B,k,n]``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if bd.ndim == 3 and (ad.ndim != 3 or ad.shape[0] != bd.shape[0]):
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} disagree")
    out = ad @ bd

    if ad.ndim == 3 and bd.ndim == 2:
        k, n = bd.shape

        def grad(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:

        def grad(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit("matmul", (a, b), out, grad)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")
    return _emit("transpose", (x,), np.swapaxes(x.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B, N, h*d] -> [B*h, N, d]."""
    B, N, D = x.shape
    if D % n_heads:
        raise ShapeError(f"split_heads: width {D} not divisible by {n_heads} heads")
    d = D // n_heads
    out = x.data.reshape(B, N, n_heads, d).transpose(0, 2, 1, 3).reshape(B * n_heads, N, d)

    def grad(g):
        return (g.reshape(B, n_heads, N, d).transpose(0, 2, 1, 3).reshape(B, N, D),)

    return _emit("split_heads", (x,), out, grad)


def merge_heads(x: Tensor, n_heads: int) -> Tensor:
    """[B*h, N, d] -> [B, N, h*d]; inverse of :func:`split_heads`."""
    BH, N, d = x.shape
    if BH % n_heads:
        raise ShapeError(f"merge_heads: leading dim {BH} not divisible by {n_heads}")
    B = BH // n_heads
    out = x.data.reshape(B, n_heads, N, d).transpose(0, 2, 1, 3).reshape(B, N, n_heads * d)

    def grad(g):
        return (g.reshape(B, N, n_heads, d).transpose(0, 2, 1, 3).reshape(BH, N, d),)

    return _emit("merge_heads", (x,), out, grad)


def concat_last_axis(tensors: Sequence[Tensor]) -> Tensor:
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last_axis: leading shapes {lead} and {t.shape[:-1]} differ")
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([t.data for t in tensors], axis=-1)

    def grad(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _emit("concat", tuple(tensors), out, grad)


def slice_last_axis(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def grad(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", (x,), x.data[..., start:stop], grad)


def gather_positions(x: Tensor, batch_idx, pos_idx) -> Tensor:
    """Rows ``x[batch_idx[i], pos_idx[i], :]`` of a [B, N, d] tensor, as [M, d]."""
    if x.ndim != 3:
        raise ShapeError(f"gather_positions needs a [B, N, d] tensor, got {x.shape}")
    bi = np.asarray(batch_idx, dtype=np.intp)
    pi = np.asarray(pos_idx, dtype=np.intp)
    shape = x.shape

    def grad(g):
        full = np.zeros(shape)
        np.add.at(full, (bi, pi), g)
        return (full,)

    return _emit("gather", (x,), x.data[bi, pi], grad)


def select_step(x: Tensor, t: int) -> Tensor:
    """Position ``t`` of every sequence in a [B, N, d] tensor, as [B, d]."""
    shape = x.shape

    def grad(g):
        full = np.zeros(shape)
        full[:, t, :] = g
        return (full,)

    return _emit("select_step", (x,), x.data[:, t, :], grad)


# ---------------------------------------------------------------------------
# normalisation and reductions


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

    return _emit("softmax", (x,), s, grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def grad(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gamma, beta), xhat * gd + beta.data, grad)


def mean_reduce(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over all entries (scalar) or over one axis."""
    shape = x.shape
    if axis is None:
        n = x.data.size
        return _emit("mean", (x,), np.asarray(x.data.mean()), lambda g: (np.full(shape, float(g) / n),))
    n = shape[axis]

    def grad(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _emit("mean_axis", (x,), x.data.mean(axis=axis), grad)


def sum_reduce(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))


# ---------------------------------------------------------------------------
# losses


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy; ``p`` is clamped to [1e-7, 1 - 1e-7]."""
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if yd.shape != p.shape:
        raise ShapeError(f"bce_loss: predictions {p.shape} vs targets {yd.shape}")
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (p.data >= BCE_CLAMP) & (p.data <= 1.0 - BCE_CLAMP)
    n = max(yd.size, 1)
    value = -np.mean(yd * np.log(pc) + (1.0 - yd) * np.log(1.0 - pc))

    def grad(g):
        return (float(g) * inside * (-(yd / pc) + (1.0 - yd) / (1.0 - pc)) / n,)

    return _emit("bce", (p,), np.asarray(value), grad)


def mse_loss(p: Tensor, y) -> Tensor:
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if yd.shape != p.shape:
        raise ShapeError(f"mse_loss: predictions {p.shape} vs targets {yd.shape}")
    if yd.size == 0:
        raise ContractError("mse_loss: no targets")
    diff = p.data - yd
    n = diff.size
    return _emit("mse", (p,), np.asarray(np.mean(diff * diff)), lambda g: (float(g) * 2.0 * diff / n,))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add_bias(out, b) if b is not None else out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))
