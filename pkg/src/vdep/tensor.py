"""Dense float64 tensors with reverse-mode automatic differentiation.

Differentiable operations record themselves, in execution order, on the
innermost active :class:`Tape`. ``backward(loss)`` replays that tape in
reverse and accumulates gradients additively into every reachable tensor
with ``requires_grad``. A tape can be consumed exactly once; a second
backward over it raises :class:`StaleTapeError`.

All forward values are required to be finite. Any operation whose result
contains NaN or Inf raises :class:`NumericError` immediately instead of
letting the poison propagate.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import IndexRangeError, NumericError, ShapeError, StaleTapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered record of differentiable operations.

    Use as a context manager around a forward pass; the tape is confined
    to the thread that created it. Operations executed while no tape is
    active still compute values but cannot be differentiated.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StaleTapeError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _append(self, out: "Tensor", inputs: tuple["Tensor", ...], rule: Callable) -> None:
        self._records.append((out, inputs, rule))


class Tensor:
    """Dense n-dimensional array of float64 with an optional gradient.

    ``data`` is row-major; ``grad`` (same shape) appears after a backward
    pass touches this tensor. Construction rejects non-finite values.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, _validate: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _validate and not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut from the graph (no gradient flows through)."""
        return Tensor(self.data, requires_grad=False, _validate=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def _grad_buffer(self) -> np.ndarray:
        """Gradient array for in-place scatter accumulation."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; named functions below do the work
    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_number(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not _is_number(other):
            raise ShapeError("tensor division only supports scalar divisors")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def _make_output(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap an op result, checking finiteness and recording on the tape."""
    # the sum of an array is finite iff every element is (at these scales)
    if not math.isfinite(float(data.sum())):
        raise NumericError("non-finite value produced in forward pass")
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs), _validate=False)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._tape = tape
        tape._append(out, tuple(inputs), rule)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar loss.

    Gradients accumulate additively across uses. The owning tape is
    consumed; a second backward over it raises StaleTapeError.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise StaleTapeError("loss was not produced under a live tape")
    if tape.consumed:
        raise StaleTapeError("tape already consumed by a previous backward")
    tape.consumed = True
    loss._accumulate(np.ones_like(loss.data))
    for out, inputs, rule in reversed(tape._records):
        if out.grad is None:
            continue
        rule(out.grad, inputs)


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def rule(g, inputs):
        x, y = inputs
        if x.requires_grad:
            x._accumulate(g)
        if y.requires_grad:
            y._accumulate(g)

    return _make_output(a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")

    def rule(g, inputs):
        x, y = inputs
        if x.requires_grad:
            x._accumulate(g)
        if y.requires_grad:
            y._accumulate(-g)

    return _make_output(a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def rule(g, inputs):
        x, y = inputs
        if x.requires_grad:
            x._accumulate(g * y.data)
        if y.requires_grad:
            y._accumulate(g * x.data)

    return _make_output(a.data * b.data, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def rule(g, inputs):
        (t,) = inputs
        if t.requires_grad:
            t._accumulate(g * c)

    return _make_output(x.data * c, (x,), rule)


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def rule(g, inputs):
        (t,) = inputs
        if t.requires_grad:
            t._accumulate(g)

    return _make_output(x.data + c, (x,), rule)


def reciprocal(x: Tensor) -> Tensor:
    def rule(g, inputs):
        (t,) = inputs
        if t.requires_grad:
            t._accumulate(-g / (t.data * t.data))

    return _make_output(1.0 / x.data, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))

    def rule(g, inputs):
        (t,) = inputs
        if t.requires_grad:
            t._accumulate(g * y * (1.0 - y))

    return _make_output(y, (x,), rule)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh approximation."""
    sq = x.data * x.data
    t = np.tanh(_GELU_C * (x.data + _GELU_A * sq * x.data))
    y = 0.5 * x.data * (1.0 + t)

    def rule(g, inputs):
        (inp,) = inputs
        if inp.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * sq)
            dy = 0.5 * (1.0 + t) + 0.5 * inp.data * (1.0 - t * t) * du
            inp._accumulate(g * dy)

    return _make_output(y, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    def rule(g, inputs):
        (t,) = inputs
        if t.requires_grad:
            t._accumulate(np.full_like(t.data, float(g)))

    return _make_output(np.asarray(x.data.sum()), (x,), rule)


# ---------------------------------------------------------------------------
# linear algebra and structure ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

    def rule(g, inputs):
        x, y = inputs
        if x.requires_grad:
            x._accumulate(g @ y.data.T)
        if y.requires_grad:
            y._accumulate(x.data.T @ g)

    return _make_output(a.data @ b.data, (a, b), rule)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")

    def rule(g, inputs):
        (t,) = inputs
        if t.requires_grad:
            t._accumulate(g.T)

    return _make_output(x.data.T.copy(), (x,), rule)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of a [n, d] matrix."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec shape mismatch: {x.shape} + {v.shape}")

    def rule(g, inputs):
        m, b = inputs
        if m.requires_grad:
            m._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make_output(x.data + v.data[None, :], (x, v), rule)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] invalid for shape {x.shape}")

    def rule(g, inputs):
        (t,) = inputs
        if t.requires_grad:
            t._grad_buffer()[start:stop] += g

    return _make_output(x.data[start:stop].copy(), (x,), rule)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] invalid for shape {x.shape}")

    def rule(g, inputs):
        (t,) = inputs
        if t.requires_grad:
            t._grad_buffer()[:, start:stop] += g

    return _make_output(x.data[:, start:stop].copy(), (x,), rule)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of nothing")
    width = parts[0].shape[1] if parts[0].data.ndim == 2 else None
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError("concat_rows requires 2-d parts of equal width")
    sizes = [p.shape[0] for p in parts]

    def rule(g, inputs):
        ofs = 0
        for t, n in zip(inputs, sizes):
            if t.requires_grad:
                t._accumulate(g[ofs:ofs + n])
            ofs += n

    return _make_output(np.concatenate([p.data for p in parts], axis=0),
                        tuple(parts), rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of nothing")
    height = parts[0].shape[0] if parts[0].data.ndim == 2 else None
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != height:
            raise ShapeError("concat_cols requires 2-d parts of equal height")
    sizes = [p.shape[1] for p in parts]

    def rule(g, inputs):
        ofs = 0
        for t, n in zip(inputs, sizes):
            if t.requires_grad:
                t._accumulate(g[:, ofs:ofs + n])
            ofs += n

    return _make_output(np.concatenate([p.data for p in parts], axis=1), tuple(parts), rule)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows ``table[ids]``; backward scatter-adds into the table."""
    if table.data.ndim != 2:
        raise ShapeError("embedding_lookup expects a 2-d table")
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexRangeError(
            f"id out of range for table with {table.shape[0]} rows: {ids}"
        )

    def rule(g, inputs):
        (t,) = inputs
        if t.requires_grad:
            np.add.at(t._grad_buffer(), idx, g)

    if idx.size == 0:
        return _make_output(np.zeros((0, table.shape[1])), (table,), rule)
    return _make_output(table.data[idx].copy(), (table,), rule)


# ---------------------------------------------------------------------------
# normalization, attention and loss kernels
# ---------------------------------------------------------------------------

def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stochastic softmax along the last axis, max-stabilized."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g, inputs):
        (t,) = inputs
        if t.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            t._accumulate(y * (g - dot))

    return _make_output(y, (x,), rule)


_attention_masks: dict[int, np.ndarray] = {}


def _additive_causal_mask(t: int) -> np.ndarray:
    mask = _attention_masks.get(t)
    if mask is None:
        # -1e9 underflows to an exact 0 after exp, so masked positions
        # contribute nothing, bit for bit
        mask = np.triu(np.full((t, t), -1e9), k=1)
        _attention_masks[t] = mask
    return mask


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int,
                         causal: bool) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over ``n_heads`` column groups.

    Returns the merged [T, d] context and the attention weights as a
    plain [n_heads, T, T] array of row-stochastic matrices.
    """
    if q.shape != k.shape or q.shape != v.shape or q.data.ndim != 2:
        raise ShapeError("attention operands must share one [T, d] shape")
    t_len, d = q.shape
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    inv = 1.0 / math.sqrt(hd)

    def split(m: np.ndarray) -> np.ndarray:
        return m.reshape(t_len, n_heads, hd).transpose(1, 0, 2)

    q3, k3, v3 = split(q.data), split(k.data), split(v.data)
    scores = (q3 @ k3.transpose(0, 2, 1)) * inv
    if causal:
        scores = scores + _additive_causal_mask(t_len)[None, :, :]
    shifted = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(shifted)
    w /= w.sum(axis=-1, keepdims=True)
    out = (w @ v3).transpose(1, 0, 2).reshape(t_len, d)

    def rule(g, inputs):
        qq, kk, vv = inputs
        g3 = g.reshape(t_len, n_heads, hd).transpose(1, 0, 2)
        dw = g3 @ v3.transpose(0, 2, 1)
        ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
        if vv.requires_grad:
            dv = (w.transpose(0, 2, 1) @ g3).transpose(1, 0, 2).reshape(t_len, d)
            vv._accumulate(dv)
        if qq.requires_grad:
            dq = ((ds @ k3) * inv).transpose(1, 0, 2).reshape(t_len, d)
            qq._accumulate(dq)
        if kk.requires_grad:
            dk = ((ds.transpose(0, 2, 1) @ q3) * inv).transpose(1, 0, 2).reshape(t_len, d)
            kk._accumulate(dk)

    return _make_output(out, (q, k, v), rule), w


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if x.data.ndim != 2:
        raise ShapeError("layer_norm expects a 2-d tensor")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    nrm = xc * inv
    y = nrm * gain.data[None, :] + bias.data[None, :]

    def rule(g, inputs):
        t, gn, bs = inputs
        dn = g * gn.data[None, :]
        if t.requires_grad:
            t._accumulate(inv * (dn - dn.mean(axis=1, keepdims=True)
                                 - nrm * (dn * nrm).mean(axis=1, keepdims=True)))
        if gn.requires_grad:
            gn._accumulate((g * nrm).sum(axis=0))
        if bs.requires_grad:
            bs._accumulate(g.sum(axis=0))

    return _make_output(y, (x, gain, bias), rule)


def cross_entropy_masked(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood over mask-enabled rows of [T, V] logits.

    Returns a 0 constant when no position is enabled.
    """
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy_masked expects [T, V] logits")
    T, V = logits.shape
    tgt = np.asarray(list(targets), dtype=np.int64)
    msk = np.asarray(list(mask), dtype=bool)
    if tgt.shape != (T,) or msk.shape != (T,):
        raise ShapeError("targets and mask must each have length T")
    if msk.any() and (tgt[msk].min() < 0 or tgt[msk].max() >= V):
        raise IndexRangeError(f"target id out of range for vocab of {V}")
    count = int(msk.sum())
    if count == 0:
        return Tensor(0.0)
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    nll = lse - logits.data[np.arange(T), tgt]
    loss = nll[msk].sum() / count

    def rule(g, inputs):
        (lg,) = inputs
        if lg.requires_grad:
            p = np.exp(lg.data - m)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(T), tgt] -= 1.0
            p[~msk] = 0.0
            lg._accumulate(p * (float(g) / count))

    return _make_output(np.asarray(loss), (logits,), rule)


def masked_mean_squared_error(pred: Tensor, target: Tensor, mask: Sequence[bool]) -> Tensor:
    """Mean squared difference over enabled rows times width; 0 if none enabled."""
    if pred.shape != target.shape or pred.data.ndim != 2:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    T, d = pred.shape
    msk = np.asarray(list(mask), dtype=bool)
    if msk.shape != (T,):
        raise ShapeError("mask length must equal the row count")
    count = int(msk.sum())
    if count == 0:
        return Tensor(0.0)
    diff = (pred.data - target.data) * msk[:, None]
    loss = (diff * diff).sum() / (count * d)

    def rule(g, inputs):
        p, t = inputs
        coeff = 2.0 * float(g) / (count * d)
        if p.requires_grad:
            p._accumulate(coeff * diff)
        if t.requires_grad:
            t._accumulate(-coeff * diff)

    return _make_output(np.asarray(loss), (pred, target), rule)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------

def finite_diff_gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
                          sample: int | None = None,
                          rng: np.random.Generator | None = None) -> float:
    """Worst relative error of the analytic gradient of scalar f against
    central finite differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    ``sample`` limits the check to that many randomly chosen coordinates,
    which is enough to catch a wrong backward rule at a fraction of the
    cost on large tensors.
    """
    x.zero_grad()
    want_grad = x.requires_grad
    x.requires_grad = True
    try:
        with Tape():
            out = f(x)
        backward(out)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        n = flat.size
        if sample is not None and sample < n:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(n, size=sample, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        a_flat = analytic.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = f(x).item()
            flat[i] = orig - step
            dn = f(x).item()
            flat[i] = orig
            numeric = (up - dn) / (2.0 * step)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
        return worst
    finally:
        x.requires_grad = want_grad
        x.zero_grad()
