"""Dense tensors over numpy with a reverse-mode gradient tape.

Only the operations needed by block-wise calibration and tiny-LM pretraining
are provided. A :class:`Tape` is activated with ``with tape:``; operations on
tensors that trace back to ``tape.variable(...)`` leaves are recorded, all
other arithmetic runs as plain constant folding.

``ste_round`` and ``ste_clamp`` use straight-through estimators by default.
A tape built with ``straight_through=False`` instead differentiates the
piecewise-constant rounding exactly (zero gradient), which is what a finite
difference of the true forward sees between rounding boundaries.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

DIV_EPS = 1e-30

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class SingularInputError(ArithmeticError):
    """A divisor had entries with magnitude below ``DIV_EPS``."""

    def __init__(self, positions: np.ndarray):
        self.positions = positions
        preview = [tuple(int(i) for i in p) for p in positions[:8]]
        super().__init__(f"near-zero denominator at {len(positions)} position(s): {preview}")


class TapeError(RuntimeError):
    pass


class Tensor:
    """Immutable n-d array of reals, optionally tracked by a tape."""

    __slots__ = ("data", "node", "tape")
    __array_priority__ = 100.0

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.node: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tracked = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass(eq=False)
class TapeNode:
    id: int
    kind: str
    inputs: tuple[int | None, ...]
    backward: Callable | None
    shape: tuple[int, ...]
    trainable: bool = False


class Tape:
    """Append-only record of a forward pass."""

    def __init__(self, straight_through: bool = True):
        self.nodes: list[TapeNode] = []
        self.straight_through = straight_through
        self.recording = True

    def __enter__(self) -> Tape:
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @contextmanager
    def paused(self) -> Iterator[None]:
        prev, self.recording = self.recording, False
        try:
            yield
        finally:
            self.recording = prev

    def variable(self, data, dtype=None, trainable: bool = True) -> Tensor:
        t = Tensor(data, dtype=dtype)
        node = TapeNode(len(self.nodes), "leaf", (), None, t.shape, trainable)
        self.nodes.append(node)
        t.node, t.tape = node.id, self
        return t

    def _record(self, kind, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        t = Tensor(out)
        ids = tuple(i.node if i.tape is self else None for i in inputs)
        node = TapeNode(len(self.nodes), kind, ids, backward, t.shape)
        self.nodes.append(node)
        t.node, t.tape = node.id, self
        return t

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of a scalar ``loss`` for every trainable leaf on this tape."""
        if not self.nodes:
            raise TapeError("backward called on an empty tape")
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.node + 1)
        grads[loss.node] = np.ones_like(loss.data)
        for node in reversed(self.nodes[: loss.node + 1]):
            g = grads[node.id]
            if g is None or node.backward is None:
                continue
            needs = tuple(i is not None for i in node.inputs)
            in_grads = node.backward(g, needs)
            for inp, ig in zip(node.inputs, in_grads):
                if inp is None or ig is None:
                    continue
                grads[inp] = ig if grads[inp] is None else grads[inp] + ig
        out = {}
        for node in self.nodes[: loss.node + 1]:
            if node.trainable:
                g = grads[node.id]
                out[node.id] = Tensor(np.zeros(node.shape) if g is None else g)
        return out


def _active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    if not stack:
        return None
    tape = stack[-1]
    return tape if tape.recording else None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _lift2(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the tensor operand's dtype
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(b, dtype=a.dtype if np.ndim(b) == 0 else None)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(a, dtype=b.dtype if np.ndim(a) == 0 else None), b
    return _lift(a), _lift(b)


def _make(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(i.tape is tape and i.node is not None for i in inputs):
        return tape._record(kind, out, inputs, backward)
    return Tensor(out)


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> tuple[int, ...]:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return a.shape if a.ndim >= b.ndim else b.shape
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        shape = None
    if shape is None or shape not in (a.shape, b.shape):
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")
    return shape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# decision tracing (used by finite_diff_check)
# --------------------------------------------------------------------------


class _DecisionTrace:
    """Log of discrete choices (round codes, clamp masks, arg-extrema).

    With ``reference`` set, each choice is compared to the reference run and
    ``crossed`` flips on any difference. With ``freeze`` the reference
    choices are replayed so the forward becomes the smooth surrogate that
    straight-through gradients differentiate.
    """

    def __init__(self, reference: list | None = None, freeze: bool = False):
        self.entries: list = []
        self.reference = reference
        self.freeze = freeze and reference is not None
        self.crossed = False

    def visit(self, entry):
        idx = len(self.entries)
        self.entries.append(entry)
        if self.reference is None:
            return None
        if idx >= len(self.reference):
            self.crossed = True
            return None
        ref = self.reference[idx]
        if not all(np.array_equal(x, y) for x, y in zip(entry[:-1], ref[:-1])):
            self.crossed = True
        return ref if self.freeze else None


def _trace() -> _DecisionTrace | None:
    return getattr(_local, "trace", None)


@contextmanager
def decision_trace(reference: list | None = None, freeze: bool = False) -> Iterator[_DecisionTrace]:
    prev = _trace()
    tr = _local.trace = _DecisionTrace(reference, freeze)
    try:
        yield tr
    finally:
        _local.trace = prev


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _broadcast_shape(a, b, "add")

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _broadcast_shape(a, b, "sub")

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _broadcast_shape(a, b, "mul")

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _lift2(a, b)
    _broadcast_shape(a, b, "div")
    small = np.abs(b.data) < DIV_EPS
    if small.any():
        raise SingularInputError(np.argwhere(small))
    out = a.data / b.data

    def bw(g, needs):
        ga = _unbroadcast(g / b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None
        return ga, gb

    return _make("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make("neg", -a.data, (a,), lambda g, needs: (-g,))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    small = np.abs(a.data) < DIV_EPS
    if small.any():
        raise SingularInputError(np.argwhere(small))
    return _make("log", np.log(a.data), (a,), lambda g, needs: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make("sigmoid", out, (a,), lambda g, needs: (g * out * (1.0 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _lift(a)
    x = a.data
    c = x.dtype.type(_GELU_C)
    x2 = x * x
    th = x2 * x
    th *= 0.044715
    th += x
    th *= c
    np.tanh(th, out=th)
    out = th + 1.0
    out *= x
    out *= 0.5

    def bw(g, needs):
        du = x2 * (3 * 0.044715)
        du += 1.0
        du *= c
        sech2 = 1.0 - th * th
        sech2 *= x
        sech2 *= du
        sech2 += 1.0 + th
        sech2 *= 0.5
        sech2 *= g
        return (sech2,)

    return _make("gelu", out, (a,), bw)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where the constant mask ``cond`` holds, else ``b``."""
    a, b = _lift2(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def bw(g, needs):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape) if needs[0] else None,
                _unbroadcast(np.where(cond, 0.0, g), b.shape) if needs[1] else None)

    return _make("where", out, (a, b), bw)


def ste_round(a) -> Tensor:
    """Round half to even; gradient passes straight through."""
    a = _lift(a)
    codes = np.round(a.data)
    tr = _trace()
    if tr is not None:
        ref = tr.visit((codes, codes - a.data))
        if ref is not None:
            codes = a.data + ref[1]
    tape = _active_tape()
    exact = tape is not None and not tape.straight_through
    return _make("ste_round", codes, (a,), lambda g, needs: (np.zeros_like(g) if exact else g,))


def ste_clamp(a, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; gradient is identity inside, zero outside."""
    a = _lift(a)
    below, above = a.data < lo, a.data > hi
    tr = _trace()
    if tr is not None:
        ref = tr.visit((below, above, None))
        if ref is not None:
            below, above = ref[0], ref[1]
    out = np.where(below, lo, np.where(above, hi, a.data)).astype(a.dtype, copy=False)
    inside = ~(below | above)
    return _make("ste_clamp", out, (a,), lambda g, needs: (g * inside,))


# --------------------------------------------------------------------------
# linear algebra and shape ops
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading dims into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw(g, needs):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if needs[0] else None
            gb = a2.T @ g2 if needs[1] else None
            return ga, gb

        return _make("matmul", out, (a, b), bw)
    out = a.data @ b.data

    def bw(g, needs):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if needs[0] else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if needs[1] else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    a = _lift(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs at least 2 dims, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g, needs: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from e
    return _make("reshape", out, (a,), lambda g, needs: (g.reshape(a.shape),))


def embedding(table, ids: np.ndarray) -> Tensor:
    """Gather rows ``table[ids]``."""
    table = _lift(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def bw(g, needs):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make("embedding", out, (table,), bw)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------


def _extremum(kind: str, a, axis: int, keepdims: bool) -> Tensor:
    a = _lift(a)
    pick = np.argmax if kind == "reduce_max" else np.argmin
    idx = np.expand_dims(pick(a.data, axis=axis), axis)
    tr = _trace()
    if tr is not None:
        ref = tr.visit((idx, None))
        if ref is not None:
            idx = ref[0]
    out = np.take_along_axis(a.data, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bw(g, needs):
        ga = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, idx, gk, axis=axis)
        return (ga,)

    return _make(kind, out, (a,), bw)


def reduce_max(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    return _extremum("reduce_max", a, axis, keepdims)


def reduce_min(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    return _extremum("reduce_min", a, axis, keepdims)


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("reduce_sum", out, (a,), bw)


def reduce_mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("reduce_mean", out, (a,), bw)


# --------------------------------------------------------------------------
# fused network ops
# --------------------------------------------------------------------------


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks allowed entries."""
    a = _lift(a)
    out = a.data.copy() if mask is None else np.where(mask, a.data, -np.inf)
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def bw(g, needs):
        gx = g * out
        gx -= out * gx.sum(axis=-1, keepdims=True)
        return (gx,)

    return _make("softmax", out, (a,), bw)


def layernorm(a, weight, bias=None, eps: float = 1e-5) -> Tensor:
    """Affine layer normalisation over the last axis."""
    a, weight = _lift(a), _lift(weight)
    inputs = [a, weight]
    if bias is not None:
        bias = _lift(bias)
        inputs.append(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g, needs):
        gx = None
        if needs[0]:
            gh = g * weight.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gw = _unbroadcast(g * xhat, weight.shape) if needs[1] else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape) if needs[2] else None)
        return tuple(grads)

    return _make("layernorm", out, inputs, bw)


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _lift(a), _lift(b)
    if b.ndim and a.shape != b.shape:
        raise ShapeError(f"mse: incompatible shapes {a.shape} and {b.shape}")
    d = a.data - b.data
    out = np.asarray((d * d).mean())
    n = d.size

    def bw(g, needs):
        gd = (2.0 / n) * g * d
        return (gd if needs[0] else None, _unbroadcast(-gd, b.shape) if needs[1] else None)

    return _make("mse", out, (a, b), bw)


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` (last axis)."""
    logits = _lift(logits)
    targets = np.asarray(targets)
    flat = logits.data.reshape(-1, logits.shape[-1])
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    t = targets.reshape(-1)
    rows = np.arange(t.size)
    out = np.asarray(-logp[rows, t].mean())

    def bw(g, needs):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        return ((g / t.size * p).reshape(logits.shape),)

    return _make("cross_entropy", out, (logits,), bw)


_OPS: dict[str, Callable] = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "transpose": transpose, "reshape": reshape, "softmax": softmax, "layernorm": layernorm,
    "gelu": gelu, "sigmoid": sigmoid, "exp": exp, "log": log, "where": where,
    "reduce_max": reduce_max, "reduce_min": reduce_min, "reduce_mean": reduce_mean,
    "reduce_sum": reduce_sum, "ste_round": ste_round, "ste_clamp": ste_clamp,
    "mse": mse, "cross_entropy": cross_entropy, "embedding": embedding,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch an operation by name, e.g. ``forward_op("ste_clamp", x, 0, 1)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(_OPS)}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheck:
    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    boundary: tuple[int, ...]


def finite_diff_check(f: Callable[[Tensor], Tensor], theta, h: float = 1e-5,
                      straight_through: bool = False) -> GradCheck:
    """Compare tape gradients of scalar ``f`` against central differences.

    With ``straight_through=False`` the tape differentiates rounding exactly
    and the numeric side perturbs the true forward; flat indices whose
    perturbation changes any discrete choice (an integer code, a clamp mask,
    an arg-extremum) are reported in ``boundary`` and excluded from
    ``max_rel_error`` so callers can jitter and retry.

    With ``straight_through=True`` the tape uses STE and the numeric side
    replays the discrete choices of the unperturbed run, so every index is
    valid; ``boundary`` is still reported.
    """
    theta = np.array(theta, dtype=np.float64)
    with decision_trace() as base, Tape(straight_through=straight_through) as tape:
        var = tape.variable(theta)
        loss = f(var)
        if loss.data.size != 1:
            raise TapeError(f"f must return a scalar, got shape {loss.shape}")
        analytic = tape.backward(loss)[var.node].data
    reference = base.entries
    numeric = np.zeros_like(theta)
    boundary = []
    for i in range(theta.size):
        vals, crossed = [], False
        for sign in (1.0, -1.0):
            t = theta.copy()
            t.flat[i] += sign * h
            with decision_trace(reference, freeze=straight_through) as tr:
                vals.append(float(f(Tensor(t)).data))
            crossed |= tr.crossed
        numeric.flat[i] = (vals[0] - vals[1]) / (2.0 * h)
        if crossed:
            boundary.append(i)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    valid = np.ones(theta.size, dtype=bool)
    if not straight_through:
        valid[boundary] = False
    max_rel = float(rel.reshape(-1)[valid].max()) if valid.any() else float("nan")
    return GradCheck(max_rel, rel, analytic, numeric, tuple(boundary))
