"""Reverse-mode automatic differentiation over dense numpy arrays.

Deliberately small substrate for a desk-scale transformer: 0-d scalars,
1-d vectors and 2-d matrices, double precision by default (float32 is an
opt-in speed mode). Operations record onto a thread-local ``Tape`` when
one is active; without a tape they are plain forward computations, which
is the inference path. No broadcasting beyond bias-add and row-wise ops.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "NumericError",
    "UsageError",
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "set_finite_checks",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "neg",
    "sum_all",
    "mean_all",
    "mean_rows",
    "relu",
    "sigmoid",
    "log",
    "clamp_min",
    "softmax",
    "layer_norm",
    "embedding_lookup",
    "take_per_row",
    "pick",
    "concat_last",
    "slice_last",
    "stack_rows",
    "transpose",
    "cross_entropy",
    "scale_gradient",
    "stop_gradient",
]


class NumericError(ArithmeticError):
    """A forward operation consumed or produced a non-finite value."""


class UsageError(RuntimeError):
    """An API contract was violated (shape mismatch, reused tape, ...)."""


_state = threading.local()

_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    """Globally enable/disable the per-op finiteness guard (default on)."""
    global _finite_checks
    _finite_checks = bool(enabled)


def _active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    """Dense array with optional gradient tracking.

    ``data`` is always a contiguous numpy array; ops never mutate it in
    place, so views may be shared between tensors.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # Light operator sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


class Tape:
    """Ordered record of forward ops; replaying it backwards yields grads.

    Recording order is a topological order of the graph, so the reversed
    sweep visits every node exactly once. A tape is single-use: call
    ``backward`` once, then query ``grad``.
    """

    def __init__(self):
        self._ops = []  # (out, inputs, backward_fn)
        self._grads = None
        self._consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise UsageError("tapes do not nest")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def _record(self, out: Tensor, inputs, backward):
        self._ops.append((out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(node) for every node on the tape."""
        if self._consumed:
            raise UsageError("tape already consumed; re-run the forward pass")
        if loss.size != 1:
            raise UsageError("backward requires a scalar loss")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._ops):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, backward(g)):
                if gi is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Total derivative of the loss w.r.t. ``t`` (zeros if off-path)."""
        if self._grads is None:
            raise UsageError("grad() requires backward() first")
        g = self._grads.get(id(t))
        return np.zeros_like(t.data) if g is None else g


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value in output of {op}")


def _make(out_data: np.ndarray, inputs, backward, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, backward)
    return out


def _as2d(a: np.ndarray):
    return a.reshape(1, -1) if a.ndim == 1 else a


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-d/1-d operands ((m,k)@(k,n), (k,)@(k,), ...)."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise UsageError("matmul supports 1-d and 2-d tensors only")
    if ad.shape[-1] != (bd.shape[0]):
        raise UsageError(f"matmul inner dims disagree: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def backward(g):
        g2 = g.reshape(_as2d(ad).shape[0], _as2d(bd).shape[1])
        ga = (g2 @ _as2d(bd).T).reshape(ad.shape)
        gb = (_as2d(ad).T @ g2).reshape(bd.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise UsageError("transpose expects a 2-d tensor")
    out = np.ascontiguousarray(x.data.T)

    def backward(g):
        return (np.ascontiguousarray(g.T),)

    return _make(out, (x,), backward, "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also (rows, d) + (d,) bias broadcast."""
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        def backward(g):
            return g, g
    elif ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:
        def backward(g):
            return g, g.sum(axis=0)
    else:
        raise UsageError(f"add shapes incompatible: {ad.shape} + {bd.shape}")
    return _make(ad + bd, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise UsageError(f"sub shapes differ: {a.shape} - {b.shape}")

    def backward(g):
        return g, -g

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise UsageError(f"mul shapes differ: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _make(ad * bd, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(x.data * c, (x,), backward, "scale")


def add_const(x: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g,)

    return _make(x.data + float(c), (x,), backward, "add_const")


def neg(x: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _make(-x.data, (x,), backward, "neg")


def sum_all(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (np.full_like(xd, g.reshape(())),)

    return _make(np.asarray(xd.sum(), dtype=xd.dtype), (x,), backward, "sum_all")


def mean_all(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (np.full_like(xd, g.reshape(()) / xd.size),)

    return _make(np.asarray(xd.mean(), dtype=xd.dtype), (x,), backward, "mean_all")


def mean_rows(x: Tensor) -> Tensor:
    """(T, d) -> (d,): arithmetic mean over rows."""
    if x.ndim != 2:
        raise UsageError("mean_rows expects a 2-d tensor")
    xd = x.data
    rows = xd.shape[0]

    def backward(g):
        return (np.repeat(g.reshape(1, -1), rows, axis=0) / rows,)

    return _make(xd.mean(axis=0), (x,), backward, "mean_rows")


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g * (xd > 0),)

    return _make(np.maximum(xd, 0.0), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), backward, "sigmoid")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out = np.log(xd)
        except FloatingPointError as e:
            raise NumericError(f"log of non-positive value: {e}") from None

    def backward(g):
        return (g / xd,)

    return _make(out, (x,), backward, "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes where x was not clamped."""
    xd = x.data
    keep = xd >= floor

    def backward(g):
        return (g * keep,)

    return _make(np.maximum(xd, floor), (x,), backward, "clamp_min")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1."""
    if axis not in (-1, x.ndim - 1):
        raise UsageError("softmax supports the last axis only")
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise UsageError("layer_norm gain/bias must match the last axis")
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# indexing / reshaping
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    """(V, d) table gathered at integer ids -> (len(ids), d)."""
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1:
        raise UsageError("embedding_lookup expects a 1-d id sequence")
    td = table.data
    if np.any(idx < 0) or np.any(idx >= td.shape[0]):
        raise UsageError("embedding id out of range")
    out = td[idx].copy()

    def backward(g):
        gt = np.zeros_like(td)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(out, (table,), backward, "embedding_lookup")


def take_per_row(x: Tensor, ids) -> Tensor:
    """(T, V) -> (T,): element ids[t] of每 row t."""
    idx = np.asarray(ids, dtype=np.intp)
    xd = x.data
    if xd.ndim != 2 or idx.shape != (xd.shape[0],):
        raise UsageError("take_per_row expects (T, V) data and T indices")
    if np.any(idx < 0) or np.any(idx >= xd.shape[1]):
        raise UsageError("take_per_row index out of range")
    rows = np.arange(xd.shape[0])

    def backward(g):
        gx = np.zeros_like(xd)
        gx[rows, idx] = g
        return (gx,)

    return _make(xd[rows, idx].copy(), (x,), backward, "take_per_row")


def pick(x: Tensor, index: int) -> Tensor:
    """1-d element extraction, keeping the gradient path."""
    xd = x.data
    if xd.ndim != 1:
        raise UsageError("pick expects a 1-d tensor")
    index = int(index)
    if not 0 <= index < xd.shape[0]:
        raise UsageError("pick index out of range")

    def backward(g):
        gx = np.zeros_like(xd)
        gx[index] = g.reshape(())
        return (gx,)

    return _make(np.asarray(xd[index], dtype=xd.dtype), (x,), backward, "pick")


def concat_last(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise UsageError("concat_last needs at least one part")
    ndim = parts[0].ndim
    if any(p.ndim != ndim for p in parts) or ndim not in (1, 2):
        raise UsageError("concat_last parts must share rank 1 or 2")
    widths = [p.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def backward(g):
        return tuple(np.ascontiguousarray(s) for s in np.split(g, np.cumsum(widths)[:-1], axis=-1))

    return _make(out, parts, backward, "concat_last")


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    xd = x.data
    if not 0 <= start < stop <= xd.shape[-1]:
        raise UsageError("slice_last bounds out of range")

    def backward(g):
        gx = np.zeros_like(xd)
        gx[..., start:stop] = g
        return (gx,)

    return _make(np.ascontiguousarray(xd[..., start:stop]), (x,), backward, "slice_last")


def stack_rows(parts) -> Tensor:
    parts = list(parts)
    if not parts or any(p.ndim != 1 for p in parts):
        raise UsageError("stack_rows expects 1-d parts")
    out = np.stack([p.data for p in parts], axis=0)

    def backward(g):
        return tuple(g[i].copy() for i in range(len(parts)))

    return _make(out, parts, backward, "stack_rows")


# ---------------------------------------------------------------------------
# composite losses and gradient plumbing
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, target_id: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-d logit vector."""
    if logits.ndim != 1:
        raise UsageError("cross_entropy expects 1-d logits")
    return neg(log(pick(softmax(logits), int(target_id))))


def scale_gradient(x: Tensor, gamma: float) -> Tensor:
    """Forward identity; backward multiplies the incoming gradient by gamma.

    Equivalent to gamma*x + (1-gamma)*stop_gradient(x) without the
    arithmetic, so the forward value is bit-identical to ``x``.
    """
    gamma = float(gamma)
    if not gamma >= 0:
        raise UsageError("scale_gradient requires gamma >= 0")

    def backward(g):
        return (g * gamma,)

    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None:
        tape._record(out, (x,), backward)
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that contributes zero gradient."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    return out
