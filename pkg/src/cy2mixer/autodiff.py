"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active (``with Tape():``)
and at least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which is what evaluation uses.

Broadcasting is deliberately narrow: a trailing-axis bias in :func:`add_bias`,
a shared 2-D operand in :func:`matmul`, and the explicit :func:`broadcast_to`.
Every other shape disagreement raises :class:`ShapeMismatch`.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NonScalarLoss, OddChannels, ShapeMismatch, TapeConsumed

_tapes: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common binary ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations.

    Records are appended as ops execute, so inputs always precede the ops that
    consume them. :meth:`backward` replays the log once in reverse.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.consumed = False
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        self.records.append(_Record(tuple(inputs), output, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if self.consumed:
            raise TapeConsumed("tape already consumed; start a new Tape")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves (tensors not produced on the tape)
        leaves = {}
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in self._produced:
                    leaves[id(t)] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf that requires it."""
    tape = tape or active_tape()
    if tape is None:
        raise ValueError("no active tape")
    tape.backward(loss)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(inputs, out, backward)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


# --- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with ``bias`` matching the trailing axis of ``x``."""
    if bias.ndim != 1 or x.shape[-1:] != bias.shape:
        raise ShapeMismatch(f"add_bias: {x.shape} vs bias {bias.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _make(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.data.dtype)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# --- shape ops --------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape: Sequence[int], axes: Sequence[int]) -> Tensor:
    """Insert new axes at ``axes`` and repeat ``x`` along them to ``shape``."""
    shape = tuple(shape)
    axes = tuple(a % len(shape) for a in axes)
    expanded = x.data
    for a in sorted(axes):
        expanded = np.expand_dims(expanded, a)
    try:
        out = np.broadcast_to(expanded, shape)
    except ValueError:
        raise ShapeMismatch(f"broadcast_to: {x.shape} -> {shape} on axes {axes}") from None
    return _make(np.ascontiguousarray(out), (x,), lambda g: (g.sum(axis=axes),))


def split_channels(x: Tensor) -> tuple[Tensor, Tensor]:
    """Split the trailing axis into first and second halves."""
    c = x.shape[-1]
    if c % 2:
        raise OddChannels(f"cannot split {c} channels in half")
    h = c // 2
    zero = np.zeros(x.shape[:-1] + (h,), dtype=x.data.dtype)
    first = _make(x.data[..., :h].copy(), (x,), lambda g: (np.concatenate([g, zero], -1),))
    second = _make(x.data[..., h:].copy(), (x,), lambda g: (np.concatenate([zero, g], -1),))
    return first, second


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the trailing axis."""
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeMismatch(f"concat: {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def bw(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], -1), tuple(parts), bw)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather ``table[idx]`` (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = table.shape[0]

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"take_rows: index outside [0, {rows})")
    return _make(table.data[idx], (table,), bw)


# --- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes.

    Either operand may be 2-D, in which case it is shared across the other
    operand's leading axes; otherwise leading axes must agree exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch axes {a.shape[:-2]} vs {b.shape[:-2]}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if a.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape(-1, *a.shape).sum(0)
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(0)
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: ``x @ weight + bias``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: x {x.shape} with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeMismatch(f"linear: bias {bias.shape} for weight {weight.shape}")
        out = out + bias.data

    def bw(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, inputs, bw)


def _patches(xp: np.ndarray, t: int, n: int) -> np.ndarray:
    # xp: (..., t+2, n+2, c) -> (..., t, n, 3, 3, c)
    return np.stack(
        [np.stack([xp[..., i : i + t, j : j + n, :] for j in range(3)], -2) for i in range(3)],
        -3,
    )


def conv2d_3x3(x: Tensor, kernel: Tensor) -> Tensor:
    """3x3 convolution over the (time, node) axes with zero padding 1.

    ``x`` is ``(..., T, N, c_in)``, ``kernel`` is ``(3, 3, c_in, c_out)``.
    """
    if x.ndim < 3 or kernel.shape[:2] != (3, 3) or kernel.ndim != 4 or kernel.shape[2] != x.shape[-1]:
        raise ShapeMismatch(f"conv2d_3x3: x {x.shape} with kernel {kernel.shape}")
    t, n = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    patches = _patches(np.pad(x.data, pad), t, n)
    cin, cout = kernel.shape[2], kernel.shape[3]
    flat = patches.reshape(-1, 9 * cin)
    kd = kernel.data.reshape(9 * cin, cout)
    out = (flat @ kd).reshape(x.shape[:-1] + (cout,))

    def bw(g):
        g2 = g.reshape(-1, cout)
        gk = (flat.T @ g2).reshape(kernel.shape)
        gp = (g2 @ kd.T).reshape(patches.shape)
        gxp = np.zeros(x.shape[:-3] + (t + 2, n + 2, x.shape[-1]), dtype=g.dtype)
        for i in range(3):
            for j in range(3):
                gxp[..., i : i + t, j : j + n, :] += gp[..., i, j, :]
        return gxp[..., 1:-1, 1:-1, :], gk

    return _make(out, (x, kernel), bw)


# --- normalizations and reductions -------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the trailing axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the trailing axis with affine parameters."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        axes = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gh = g * gd
        gx = inv * (gh - gh.mean(-1, keepdims=True) - xhat * (gh * xhat).mean(-1, keepdims=True))
        return gx, gg, gb

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _make(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n, dtype=x.data.dtype),))


def mae_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error against a constant target."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mae_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _make(np.asarray(np.abs(diff).mean()), (pred,), lambda g: (g * np.sign(diff) / n,))


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"huber_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    ad = np.abs(diff)
    quad = ad <= delta
    val = np.where(quad, 0.5 * diff * diff, delta * (ad - 0.5 * delta))
    n = diff.size
    return _make(
        np.asarray(val.mean()),
        (pred,),
        lambda g: (g * np.where(quad, diff, delta * np.sign(diff)) / n,),
    )


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _make(np.asarray((diff * diff).mean()), (pred,), lambda g: (g * 2.0 * diff / n,))


def affine(x: Tensor, scale_vec, shift_vec) -> Tensor:
    """``x * scale + shift`` with constant vectors over the trailing axis."""
    s = np.asarray(scale_vec, dtype=x.data.dtype)
    b = np.asarray(shift_vec, dtype=x.data.dtype)
    if s.shape != x.shape[-1:] or b.shape != x.shape[-1:]:
        raise ShapeMismatch(f"affine: {x.shape} with scale {s.shape}, shift {b.shape}")
    return _make(x.data * s + b, (x,), lambda g: (g * s,))
