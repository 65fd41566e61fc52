"""Dense float64 tensors with a reverse-mode gradient tape.

The surface is deliberately small: exactly the operations the attention
kernels, the transformer blocks and the losses need, nothing more.  All
storage is numpy float64.  Gradients are computed by recording every
produced tensor on a thread-local Tape and replaying the records in
reverse.

Broadcasting is restricted on purpose.  Supported shapes per op:

  * elementwise add/sub/mul of two tensors with identical shapes,
  * tensor (+|-|*) python scalar,
  * matrix (m, n) (+|*) row vector (n,), applied to every row.

Anything else raises ShapeError.  Keeping the rules this narrow makes
every backward formula a one-liner and removes a whole class of silent
shape bugs.

Masking convention: additive masks use the sentinel MASK_SENTINEL
(-1e30).  softmax_rows treats entries at or below -1e29 as masked and
gives them probability exactly 0.0.  A row with every entry masked has
no defined distribution and raises DegenerateRowError.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateRowError,
    IndexBoundsError,
    ShapeError,
)

MASK_SENTINEL = -1.0e30
# Anything at or below this is treated as "masked" by softmax_rows.  The
# gap between the sentinel and the cutoff absorbs finite scores added on
# top of the sentinel: |score| stays far below 1e29 in practice.
_MASK_CUTOFF = -1.0e29

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tape_stack", None)
    if stack is None:
        stack = []
        _local.tape_stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    if stack and isinstance(stack[-1], Tape):
        return stack[-1]
    return None


class Tape:
    """Records produced tensors in creation order for reverse replay.

    Use as a context manager:

        with Tape() as tape:
            loss = ...
        tape.backward(loss)

    Tapes nest; only the innermost active tape records.  A nested tape
    can be discarded after use (gradient-of-gradient is not supported,
    the outer tape never sees the inner tape's records).
    """

    def __init__(self) -> None:
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        top = _tape_stack().pop()
        if top is not self:
            raise ContractError("tape stack corrupted: exited out of order")

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: "Tensor", targets: Sequence["Tensor"] | None = None) -> None:
        """Accumulate d loss / d t into t.grad for reachable tensors.

        loss must be a scalar (size-1) tensor recorded on this tape.  If
        targets is given, only those tensors receive a .grad; everything
        else still participates in the chain rule but keeps grad None.
        Leaf gradients accumulate across calls; call zero_grad between
        steps.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._nodes:
            raise ContractError("backward on an empty tape")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")

        target_ids = None if targets is None else {id(t) for t in targets}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}

        def deposit(t: "Tensor", g: np.ndarray) -> None:
            if not t.requires_grad:
                return
            if target_ids is not None and id(t) not in target_ids:
                return
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad = t.grad + g

        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            holders.pop(id(node), None)
            deposit(node, g)
            if node._bwd is None:
                continue
            parent_grads = node._bwd(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    holders[key] = parent

        # Whatever is left belongs to leaves: tensors that were created
        # outside any op (parameters, perturbations) and therefore never
        # appear in the node list.
        for key, g in grads.items():
            deposit(holders[key], g)


class no_grad:
    """Context manager that suspends recording entirely."""

    def __enter__(self) -> "no_grad":
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_tape")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._bwd: Callable | None = None
        self._tape: Tape | None = None

    # -- construction helpers ------------------------------------------

    @staticmethod
    def _from_data(data: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._bwd = None
        t._tape = None
        return t

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum_all(self)


def _record(out: Tensor, parents: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
        out._tape = tape
        tape._nodes.append(out)
    return out


def _as_tensor_operand(x) -> Tensor | float | None:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return float(x)
    return None


# -- creation ----------------------------------------------------------


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64), requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# -- elementwise -------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b for same-shape tensors, tensor + scalar, or (m,n) + (n,)."""
    b = _as_tensor_operand(b)
    if b is None:
        raise ShapeError(f"add: unsupported operand {type(b)}")
    if isinstance(b, float):
        out = Tensor._from_data(a.data + b)
        return _record(out, (a,), lambda g: [g])
    if a.shape == b.shape:
        out = Tensor._from_data(a.data + b.data)
        return _record(out, (a, b), lambda g: [g, g])
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor._from_data(a.data + b.data[None, :])
        return _record(out, (a, b), lambda g: [g, g.sum(axis=0)])
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor_operand(b)
    if b is None:
        raise ShapeError(f"sub: unsupported operand {type(b)}")
    if isinstance(b, float):
        out = Tensor._from_data(a.data - b)
        return _record(out, (a,), lambda g: [g])
    if a.shape == b.shape:
        out = Tensor._from_data(a.data - b.data)
        return _record(out, (a, b), lambda g: [g, -g])
    raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    out = Tensor._from_data(-a.data)
    return _record(out, (a,), lambda g: [-g])


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product; same shape rules as add."""
    b = _as_tensor_operand(b)
    if b is None:
        raise ShapeError(f"mul: unsupported operand {type(b)}")
    if isinstance(b, float):
        s = b
        out = Tensor._from_data(a.data * s)
        return _record(out, (a,), lambda g: [g * s])
    if a.shape == b.shape:
        out = Tensor._from_data(a.data * b.data)
        ad, bd = a.data, b.data
        return _record(out, (a, b), lambda g: [g * bd, g * ad])
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor._from_data(a.data * b.data[None, :])
        ad, bd = a.data, b.data
        return _record(out, (a, b), lambda g: [g * bd[None, :], (g * ad).sum(axis=0)])
    raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul expects two tensors")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor._from_data(a.data @ b.data)
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: [g @ bd.T, ad.T @ g])


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor._from_data(np.ascontiguousarray(a.data.T))
    return _record(out, (a,), lambda g: [np.ascontiguousarray(g.T)])


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    orig = a.shape
    out = Tensor._from_data(np.ascontiguousarray(a.data.reshape(shape)))
    return _record(out, (a,), lambda g: [g.reshape(orig)])


# -- reductions --------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._from_data(np.asarray(a.data.sum()))
    shape = a.shape
    return _record(out, (a,), lambda g: [np.full(shape, float(g))])


def row_sum(a: Tensor) -> Tensor:
    """Sum over the last axis of a matrix: (m, n) -> (m,)."""
    if a.ndim != 2:
        raise ShapeError(f"row_sum expects a matrix, got shape {a.shape}")
    out = Tensor._from_data(a.data.sum(axis=1))
    n = a.shape[1]
    return _record(out, (a,), lambda g: [np.repeat(g[:, None], n, axis=1)])


# -- gathers and slices ------------------------------------------------


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup: output[i..., :] = table[indices[i...], :].

    indices is an integer array of any shape; the output has that shape
    plus the table's column axis.  Duplicate indices accumulate their
    gradients into the same row, which is what embedding layers need.
    """
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix table, got {table.shape}")
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ContractError("gather_rows indices must be integers")
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        bad = idx[(idx < 0) | (idx >= rows)].flat[0]
        raise IndexBoundsError(f"gather_rows index {bad} out of range [0, {rows})")
    idx = idx.copy()
    out = Tensor._from_data(table.data[idx])
    cols = table.shape[1]
    tshape = table.shape

    def bwd(g):
        gt = np.zeros(tshape)
        np.add.at(gt, idx.ravel(), g.reshape(-1, cols))
        return [gt]

    return _record(out, (table,), bwd)


def gather_elements(a: Tensor, col_indices) -> Tensor:
    """Per-row column lookup: output[i, j] = a[i, col_indices[i, j]]."""
    if a.ndim != 2:
        raise ShapeError(f"gather_elements expects a matrix, got {a.shape}")
    cols = np.asarray(col_indices)
    if cols.dtype.kind not in "iu":
        raise ContractError("gather_elements indices must be integers")
    if cols.ndim != 2 or cols.shape[0] != a.shape[0]:
        raise ShapeError(
            f"gather_elements: index shape {cols.shape} does not pair with {a.shape}"
        )
    n = a.shape[1]
    if cols.size and (cols.min() < 0 or cols.max() >= n):
        bad = cols[(cols < 0) | (cols >= n)].flat[0]
        raise IndexBoundsError(f"gather_elements index {bad} out of range [0, {n})")
    cols = cols.copy()
    rows = np.arange(a.shape[0])[:, None]
    out = Tensor._from_data(a.data[rows, cols])
    ashape = a.shape

    def bwd(g):
        ga = np.zeros(ashape)
        np.add.at(ga, (np.broadcast_to(rows, cols.shape), cols), g)
        return [ga]

    return _record(out, (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"slice_cols expects a matrix, got {a.shape}")
    if not (0 <= start <= stop <= a.shape[1]):
        raise IndexBoundsError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")
    out = Tensor._from_data(a.data[:, start:stop].copy())
    ashape = a.shape

    def bwd(g):
        ga = np.zeros(ashape)
        ga[:, start:stop] = g
        return [ga]

    return _record(out, (a,), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one part")
    if any(p.ndim != 2 for p in parts):
        raise ShapeError("concat_cols expects matrices")
    rows = parts[0].shape[0]
    if any(p.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    out = Tensor._from_data(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return list(np.split(g, splits, axis=1))

    return _record(out, tuple(parts), bwd)


# -- nonlinearities ----------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with additive-mask awareness.

    Entries at or below -1e29 are treated as masked: they receive
    probability exactly 0.0 and propagate zero gradient.  A row with all
    entries masked raises DegenerateRowError naming the row.
    """
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {a.shape}")
    data = a.data
    masked = data <= _MASK_CUTOFF
    dead = masked.all(axis=1)
    if dead.any():
        row = int(np.argmax(dead))
        raise DegenerateRowError(f"softmax row {row} is fully masked")
    live = np.where(masked, -np.inf, data)
    m = live.max(axis=1, keepdims=True)
    e = np.exp(data - m)
    e[masked] = 0.0
    y = e / e.sum(axis=1, keepdims=True)

    out = Tensor._from_data(y)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return [y * (g - dot)]

    return _record(out, (a,), bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    """Row-wise log softmax.  No mask handling: intended for logits."""
    if a.ndim != 2:
        raise ShapeError(f"log_softmax_rows expects a matrix, got {a.shape}")
    m = a.data.max(axis=1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    out = Tensor._from_data(out_data)
    soft = np.exp(out_data)

    def bwd(g):
        return [g - soft * g.sum(axis=1, keepdims=True)]

    return _record(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation followed by an affine map.

    Uses the population variance over the last axis.  eps >= 0; zero is
    permitted (callers feeding constant rows with eps=0 get a division
    by zero, which is on them per the precondition).
    """
    if a.ndim != 2:
        raise ShapeError(f"layer_norm expects a matrix, got {a.shape}")
    d = a.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}"
        )
    if eps < 0:
        raise ContractError("layer_norm: eps must be non-negative")
    mu = a.data.mean(axis=1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._from_data(xhat * gain.data[None, :] + bias.data[None, :])
    gd = gain.data

    def bwd(g):
        dxhat = g * gd[None, :]
        term = d * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(
            axis=1, keepdims=True
        )
        dx = inv / d * term
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        return [dx, dgain, dbias]

    return _record(out, (a, gain, bias), bwd)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation (smooth everywhere)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor._from_data(0.5 * x * (1.0 + t))

    def bwd(g):
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return [g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)]

    return _record(out, (a,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout.  p == 0 returns the input tensor unchanged."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate {p} outside [0, 1)")
    if p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(np.float64)
    scale = 1.0 / (1.0 - p)
    out = Tensor._from_data(a.data * keep * scale)
    return _record(out, (a,), lambda g: [g * keep * scale])


def backward(loss: Tensor, targets: Sequence[Tensor] | None = None) -> None:
    """Replay the tape that recorded loss.  See Tape.backward."""
    if loss._tape is None:
        raise ContractError("backward: loss was not recorded on any tape")
    loss._tape.backward(loss, targets=targets)
