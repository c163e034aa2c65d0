"""Dense tensors with taped reverse-mode gradients.

Everything differentiable in the engine flows through this module: a Tensor
wraps a numpy array (float32 by default, float64 for gradient checking), ops
append backward closures to the active Tape, and ``backward(loss)`` replays
the tape in reverse to populate ``.grad`` on every reachable tensor.

Broadcasting is deliberately restricted: elementwise ops take same-shape
operands or a python scalar; the only structured variants are ``scale_by``
(learnable scalar times tensor) and ``scale_rows`` (per-row weights).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Parameter", "Tape", "no_grad", "ShapeError",
    "tensor", "add", "sub", "mul", "div", "neg", "scale", "scale_by",
    "scale_rows", "tsum", "tmean", "log", "exp", "relu", "leaky_relu",
    "softmax", "log_softmax", "matmul", "concat", "reshape", "transpose",
    "RowPlan", "gather_rows", "scatter_rows", "backward",
    "finite_diff_check", "kink_mask",
]


class ShapeError(ValueError):
    pass


_FLOAT_DTYPES = (np.float32, np.float64)


class Tape:
    """Ordered record of executed differentiable ops for one forward pass."""

    __slots__ = ("_records", "_consumed")

    def __init__(self):
        self._records = []
        self._consumed = False

    def __len__(self):
        return len(self._records)

    def __enter__(self):
        _push(self)
        return self

    def __exit__(self, *exc):
        _pop(self)
        return False


_TAPE_STACK: list[Tape | None] = []


def _push(t):
    _TAPE_STACK.append(t)


def _pop(t):
    popped = _TAPE_STACK.pop()
    assert popped is t, "tape stack corrupted"


def _active() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Context manager disabling recording (pure forward evaluation)."""

    def __enter__(self):
        _push(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, (np.ndarray, np.generic)):
            data = np.asarray(data)
            if data.dtype not in _FLOAT_DTYPES:
                data = data.astype(np.float32)
        else:
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def accum_grad(self, g, own=False):
        # own=True: g is freshly allocated and may be adopted without copy
        if self.grad is None:
            if own and isinstance(g, np.ndarray) and g.shape == self.data.shape \
                    and g.flags.owndata and g.flags.writeable:
                self.grad = g
            else:
                self.grad = np.zeros_like(self.data)
                self.grad += g
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # convenience arithmetic (tests/losses); heavy code calls the functions directly
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Named trainable tensor; grad accumulates across backward calls."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(np.ascontiguousarray(data), requires_grad=True)
        self.name = name

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def tensor(data, dtype=np.float32, requires_grad=False):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _record(out, inputs, bwd):
    tape = _active()
    if tape is None:
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._records.append((out, bwd))
    return out


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: operand shapes {a.data.shape} and {b.data.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{opname}: operand dtypes {a.data.dtype} and {b.data.dtype} differ")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    if not isinstance(b, Tensor):
        out = Tensor(a.data + b)
        def bwd():
            a.accum_grad(out.grad)
        return _record(out, (a,), bwd)
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    def bwd():
        g = out.grad
        if a.requires_grad:
            a.accum_grad(g)
        if b.requires_grad:
            b.accum_grad(g)
    return _record(out, (a, b), bwd)


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    def bwd():
        g = out.grad
        if a.requires_grad:
            a.accum_grad(g)
        if b.requires_grad:
            b.accum_grad(-g)
    return _record(out, (a, b), bwd)


def mul(a, b):
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    def bwd():
        g = out.grad
        if a.requires_grad:
            a.accum_grad(g * b.data, own=True)
        if b.requires_grad:
            b.accum_grad(g * a.data, own=True)
    return _record(out, (a, b), bwd)


def div(a, b):
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / b)
    _check_same_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    def bwd():
        g = out.grad
        if a.requires_grad:
            a.accum_grad(g / b.data, own=True)
        if b.requires_grad:
            b.accum_grad(-g * out.data / b.data, own=True)
    return _record(out, (a, b), bwd)


def scale(a, s):
    s = float(s)
    out = Tensor(a.data * s)
    def bwd():
        a.accum_grad(out.grad * s, own=True)
    return _record(out, (a,), bwd)


def neg(a):
    return scale(a, -1.0)


def scale_by(x, s):
    """x * s where s is a scalar tensor (e.g. a learnable gamma)."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by: scale has shape {s.data.shape}, expected a single value")
    sval = s.data.reshape(())
    out = Tensor(x.data * sval)
    def bwd():
        g = out.grad
        if x.requires_grad:
            x.accum_grad(g * sval, own=True)
        if s.requires_grad:
            s.accum_grad(np.sum(g * x.data).reshape(s.data.shape).astype(s.data.dtype))
    return _record(out, (x, s), bwd)


def scale_rows(x, w):
    """Row-wise scaling: x[i, :] * w[i, 0] for x [R, F], w [R, 1]."""
    if x.data.ndim != 2 or w.data.shape != (x.data.shape[0], 1):
        raise ShapeError(f"scale_rows: got x {x.data.shape}, w {w.data.shape}")
    out = Tensor(x.data * w.data)
    def bwd():
        g = out.grad
        if x.requires_grad:
            x.accum_grad(g * w.data, own=True)
        if w.requires_grad:
            w.accum_grad(np.sum(g * x.data, axis=1, keepdims=True), own=True)
    return _record(out, (x, w), bwd)


# ---------------------------------------------------------------------------
# reductions and pointwise maps

def tsum(x, axis=None, keepdims=False):
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    shape = x.data.shape
    def bwd():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad += g  # broadcasts over the reduced axes
    return _record(out, (x,), bwd)


def tmean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= x.data.shape[ax]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def log(x):
    out = Tensor(np.log(x.data))
    def bwd():
        x.accum_grad(out.grad / x.data, own=True)
    return _record(out, (x,), bwd)


# Subnormal floats stall x86 multiplies with microcode assists, and softmax
# over a wide-spread row produces millions of them, slowing the attention
# GEMMs ~30x. Clamping the exponent at the dtype floor keeps every exp result
# (and its quotient after the normalizing division) a normal float; the
# distortion is < 9e-27 absolute per entry, invisible at working precision.
_EXP_FLOOR = {np.dtype(np.float32): -60.0, np.dtype(np.float64): -600.0}


def _clamped_exp(d, out=None):
    floor = _EXP_FLOOR[d.dtype]
    clamped = np.maximum(d, floor, out=out)
    return np.exp(clamped, out=clamped)


def exp(x, floored=False):
    """Elementwise exp; floored=True clamps exponents at the dtype's
    underflow floor so no result is subnormal."""
    if floored:
        out = Tensor(_clamped_exp(x.data))
    else:
        out = Tensor(np.exp(x.data))
    def bwd():
        x.accum_grad(out.grad * out.data, own=True)
    return _record(out, (x,), bwd)


def relu(x):
    out = Tensor(np.maximum(x.data, 0))
    def bwd():
        x.accum_grad(out.grad * (out.data > 0), own=True)
    return _record(out, (x,), bwd)


def leaky_relu(x, slope=0.2):
    d = x.data
    out = Tensor(np.where(d >= 0, d, d * slope))
    def bwd():
        x.accum_grad(out.grad * np.where(d >= 0, 1.0, slope).astype(d.dtype), own=True)
    return _record(out, (x,), bwd)


def softmax(x, axis, consume_input=False):
    """Row-normalized exponentials with max subtraction.

    consume_input=True reuses x's buffer for the output; legal only when x
    has no other consumer (its data is destroyed, its gradient is unaffected
    since this op's backward reads only the output values).
    """
    d = x.data
    if not -d.ndim <= axis < d.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {d.shape}")
    m = np.max(d, axis=axis, keepdims=True)
    y = np.subtract(d, m, out=d if consume_input else None)
    _clamped_exp(y, out=y)
    denom = np.sum(y, axis=axis, keepdims=True)
    y /= denom
    out = Tensor(y)
    def bwd():
        g = out.grad
        dot = np.sum(g * y, axis=axis, keepdims=True)
        # g is fully accumulated by now; reuse its buffer for the input grad
        np.subtract(g, dot, out=g)
        np.multiply(g, y, out=g)
        x.accum_grad(g, own=True)
    return _record(out, (x,), bwd)


def log_softmax(x, axis):
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    shifted = d - m
    lse = np.log(np.sum(_clamped_exp(shifted.copy()), axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    def bwd():
        g = out.grad
        sm = _clamped_exp(out.data.copy())
        x.accum_grad(g - sm * np.sum(g, axis=axis, keepdims=True), own=True)
    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and layout

def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul: operands must have ndim >= 2")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims {ad.shape} x {bd.shape} do not align")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: leading batch dims {ad.shape[:-2]} vs {bd.shape[:-2]}")
    out = Tensor(np.matmul(ad, bd))
    def bwd():
        g = out.grad
        if a.requires_grad:
            a.accum_grad(np.matmul(g, np.swapaxes(bd, -1, -2)), own=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
            if bd.ndim == 2 and gb.ndim > 2:
                gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
            b.accum_grad(gb, own=True)
    return _record(out, (a, b), bwd)


def concat(tensors, axis):
    ref = tensors[0].data
    for t in tensors[1:]:
        if t.data.ndim != ref.ndim:
            raise ShapeError("concat: rank mismatch")
        for ax in range(ref.ndim):
            if ax != axis % ref.ndim and t.data.shape[ax] != ref.shape[ax]:
                raise ShapeError(f"concat: shapes {[u.data.shape for u in tensors]} differ off-axis")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    def bwd():
        g = out.grad
        start = 0
        sl = [slice(None)] * g.ndim
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                sl[axis] = slice(start, start + n)
                t.accum_grad(g[tuple(sl)])
            start += n
    return _record(out, tuple(tensors), bwd)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    orig = x.data.shape
    def bwd():
        x.accum_grad(out.grad.reshape(orig))
    return _record(out, (x,), bwd)


def transpose(x, axes):
    out = Tensor(np.transpose(x.data, axes))
    inv = np.argsort(axes)
    def bwd():
        x.accum_grad(np.transpose(out.grad, inv))
    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# row gather/scatter over precomputed segment plans (graph message passing)

class RowPlan:
    """Index plan mapping E rows onto N segments, with a reduceat layout.

    ``idx[e]`` is the segment of row e. ``perm`` sorts rows by segment
    (stable), ``starts``/``seg_ids`` delimit the non-empty segments in the
    sorted order. Built once per edge structure and reused every call.
    """

    __slots__ = ("idx", "n", "perm", "starts", "seg_ids")

    def __init__(self, idx, n):
        idx = np.asarray(idx, dtype=np.int64)
        self.idx = idx
        self.n = int(n)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ShapeError(f"RowPlan: indices outside [0, {n})")
        self.perm = np.argsort(idx, kind="stable")
        sorted_idx = idx[self.perm]
        if idx.size:
            boundaries = np.flatnonzero(np.diff(sorted_idx)) + 1
            self.starts = np.concatenate(([0], boundaries))
            self.seg_ids = sorted_idx[self.starts]
        else:
            self.starts = np.zeros(0, dtype=np.int64)
            self.seg_ids = np.zeros(0, dtype=np.int64)

    def scatter_data(self, rows):
        out = np.zeros((self.n,) + rows.shape[1:], dtype=rows.dtype)
        if rows.shape[0]:
            out[self.seg_ids] = np.add.reduceat(rows[self.perm], self.starts, axis=0)
        return out

    def segment_max_data(self, rows):
        out = np.full((self.n,) + rows.shape[1:], -np.inf, dtype=rows.dtype)
        if rows.shape[0]:
            out[self.seg_ids] = np.maximum.reduceat(rows[self.perm], self.starts, axis=0)
        return out


def gather_rows(x, plan):
    """out[e] = x[plan.idx[e]]; adjoint of scatter_rows on the same plan."""
    out = Tensor(x.data[plan.idx])
    def bwd():
        x.accum_grad(plan.scatter_data(out.grad), own=True)
    return _record(out, (x,), bwd)


def scatter_rows(x, plan):
    """out[i] = sum of x rows with plan.idx == i (segment sum)."""
    if x.data.shape[0] != plan.idx.shape[0]:
        raise ShapeError(f"scatter_rows: {x.data.shape[0]} rows vs plan of {plan.idx.shape[0]}")
    out = Tensor(plan.scatter_data(x.data))
    def bwd():
        x.accum_grad(out.grad[plan.idx], own=True)
    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# backward driver and gradient checking

def backward(loss):
    """Populate .grad of every tensor reachable from ``loss``'s tape.

    Consumes the tape: records are dropped afterwards, which breaks the
    tensor -> tape -> closure -> tensor reference cycles so the step's
    activation buffers free by refcount instead of waiting for a cyclic
    garbage-collection pass. One backward per tape.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("backward: no recorded forward pass for this tensor")
    if tape._consumed:
        raise RuntimeError("backward: tape already consumed by an earlier backward")
    loss.accum_grad(np.ones_like(loss.data))
    for out, bwd in reversed(tape._records):
        if out.grad is not None:
            bwd()
            out.grad = None  # dead from here on; frees the buffer for reuse
    tape._consumed = True
    tape._records.clear()


def kink_mask(x_data, tol=1e-4):
    """Coordinates within tol of a relu/leaky-relu kink (excluded from FD checks)."""
    return np.abs(x_data) < tol


def finite_diff_check(f, x, eps=1e-5, exclude=None):
    """Max relative error between analytic grad of f at x and central differences.

    f is a deterministic scalar-valued function of a single Tensor; evaluation
    must be in 64-bit mode. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if x.data.dtype != np.float64:
        raise ValueError("finite_diff_check requires float64 tensors")
    x.requires_grad = True
    x.grad = None
    with Tape():
        out = f(x)
        if out.data.size != 1:
            raise ShapeError("finite_diff_check: f must return a scalar")
        backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * eps)
    numeric = numeric.reshape(x.data.shape)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    if exclude is not None:
        rel = np.where(exclude, 0.0, rel)
    return float(rel.max()) if rel.size else 0.0
