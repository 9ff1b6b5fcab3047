"""Dense float64 matrices with reverse-mode gradients on an explicit tape.

Every differentiable operation in the pipeline is a module-level function
taking and returning `Matrix` values. When a `Tape` is active (entered as a
context manager) each op appends a backward closure; `Tape.backward` walks
the records in exact reverse execution order and accumulates gradients
additively, keyed by matrix identity. With no active tape the ops run
forward-only, which is how frozen modules are evaluated at inference.

Values are 2-D float64 throughout. -inf never propagates past
`softmax_rows`, which is the single op that understands it (masked entries
get weight zero).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from .errors import EmptySoftmaxRowError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_ACTIVE_TAPE = None


class Matrix:
    """Immutable 2-D float64 value. Gradients live on the tape, not here."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix must be 2-D, got shape {arr.shape}")
        self.data = arr

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar Matrix of shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"Matrix(shape={self.data.shape})"


def constant(data) -> Matrix:
    """Wrap an array as a Matrix. Any gradient it accumulates is ignored."""
    return Matrix(data)


class Tape:
    """Ordered record of executed ops; owns the gradients of one backward pass.

    Single-threaded by contract: one training step owns one tape.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn), in execution order
        self._grads = {}  # id(Matrix) -> np.ndarray
        self._live = {}  # id(Matrix) -> Matrix, keeps ids stable

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        return False

    def record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))

    def _accumulate(self, m, g):
        key = id(m)
        if key in self._grads:
            self._grads[key] += g
        else:
            self._grads[key] = np.array(g, dtype=np.float64, copy=True)
            self._live[key] = m

    def backward(self, loss, seed=None):
        """Accumulate d(sum(loss))/d(input) for every op input on this tape."""
        if seed is None:
            seed = np.ones_like(loss.data)
        self._accumulate(loss, seed)
        for out, inputs, backward_fn in reversed(self._records):
            g = self._grads.get(id(out))
            if g is None:
                continue
            for m, gi in zip(inputs, backward_fn(g)):
                if gi is not None:
                    self._accumulate(m, gi)

    def grad(self, m):
        return self._grads.get(id(m))

    def zero_grads(self):
        self._grads.clear()
        self._live.clear()


def _tape():
    return _ACTIVE_TAPE


def _record(out, inputs, backward_fn):
    t = _ACTIVE_TAPE
    if t is not None:
        t.record(out, inputs, backward_fn)


def _unbroadcast(g, shape):
    # b was broadcast against a full-shape operand; fold g back to b's shape
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a, b):
    if b.shape == a.shape:
        return
    if b.rows in (1, a.rows) and b.cols in (1, a.cols):
        return
    raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}")


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """a @ b. Gradients: d/da = g @ b.T, d/db = a.T @ g."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out = Matrix(a.data @ b.data)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def transpose(a: Matrix) -> Matrix:
    out = Matrix(a.data.T.copy())
    _record(out, (a,), lambda g: (g.T,))
    return out


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; b may be a row (1xC), column (Mx1) or scalar (1x1)."""
    _check_broadcast(a, b)
    out = Matrix(a.data + b.data)
    bshape = b.shape
    _record(out, (a, b), lambda g: (g, _unbroadcast(g, bshape)))
    return out


def sub(a: Matrix, b: Matrix) -> Matrix:
    _check_broadcast(a, b)
    out = Matrix(a.data - b.data)
    bshape = b.shape
    _record(out, (a, b), lambda g: (g, -_unbroadcast(g, bshape)))
    return out


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Hadamard product with row/column/scalar broadcast on b."""
    _check_broadcast(a, b)
    out = Matrix(a.data * b.data)
    ad, bd, bshape = a.data, b.data, b.shape
    _record(out, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, bshape)))
    return out


def div(a: Matrix, b: Matrix) -> Matrix:
    _check_broadcast(a, b)
    out = Matrix(a.data / b.data)
    ad, bd, bshape = a.data, b.data, b.shape
    _record(
        out,
        (a, b),
        lambda g: (g / bd, _unbroadcast(-g * ad / (bd * bd), bshape)),
    )
    return out


def scale(a: Matrix, c: float) -> Matrix:
    out = Matrix(a.data * c)
    _record(out, (a,), lambda g: (g * c,))
    return out


def neg(a: Matrix) -> Matrix:
    return scale(a, -1.0)


def gelu(a: Matrix) -> Matrix:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Matrix(x * phi)
    dens = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    local = phi + x * dens
    _record(out, (a,), lambda g: (g * local,))
    return out


def softplus(a: Matrix) -> Matrix:
    out = Matrix(np.logaddexp(0.0, a.data))
    sig = expit(a.data)
    _record(out, (a,), lambda g: (g * sig,))
    return out


def sigmoid(a: Matrix) -> Matrix:
    s = expit(a.data)
    out = Matrix(s)
    _record(out, (a,), lambda g: (g * s * (1.0 - s),))
    return out


def sqrt(a: Matrix) -> Matrix:
    r = np.sqrt(a.data)
    out = Matrix(r)
    _record(out, (a,), lambda g: (g * (0.5 / r),))
    return out


def softmax_rows(a: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction; -inf entries get weight 0.

    Raises EmptySoftmaxRowError if a row is entirely -inf.
    """
    x = a.data
    rowmax = np.max(x, axis=1, keepdims=True)
    if np.any(np.isneginf(rowmax)):
        raise EmptySoftmaxRowError("softmax row with every entry masked")
    e = np.exp(x - rowmax)
    s = e / e.sum(axis=1, keepdims=True)
    out = Matrix(s)

    def backward(g):
        dot = np.sum(g * s, axis=1, keepdims=True)
        return (s * (g - dot),)

    _record(out, (a,), backward)
    return out


def layer_norm(a: Matrix, eps: float = 1e-6) -> Matrix:
    """Per-row normalization (no affine; apply gain/bias with mul/add)."""
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Matrix(y)

    def backward(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = np.mean(g * y, axis=1, keepdims=True)
        return ((g - gm - y * gy) * inv,)

    _record(out, (a,), backward)
    return out


def linear(x: Matrix, w: Matrix, b: Matrix) -> Matrix:
    """x @ w + b with b a 1 x out row."""
    return add(matmul(x, w), b)


def sum_all(a: Matrix) -> Matrix:
    out = Matrix([[a.data.sum()]])
    shape = a.shape
    _record(out, (a,), lambda g: (np.full(shape, g[0, 0]),))
    return out


def mean_all(a: Matrix) -> Matrix:
    n = a.data.size
    out = Matrix([[a.data.sum() / n]])
    shape = a.shape
    _record(out, (a,), lambda g: (np.full(shape, g[0, 0] / n),))
    return out


def sum_cols(a: Matrix) -> Matrix:
    """Row sums, shape (M, 1)."""
    out = Matrix(a.data.sum(axis=1, keepdims=True))
    cols = a.cols
    _record(out, (a,), lambda g: (np.repeat(g, cols, axis=1),))
    return out


def gather_rows(a: Matrix, idx) -> Matrix:
    """Select rows by integer index; repeated indices scatter-add on backward."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Matrix(a.data[idx])
    rows, cols = a.shape

    def backward(g):
        d = np.zeros((rows, cols))
        np.add.at(d, idx, g)
        return (d,)

    _record(out, (a,), backward)
    return out


def concat_rows(parts) -> Matrix:
    parts = list(parts)
    out = Matrix(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.rows for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=0))

    _record(out, tuple(parts), backward)
    return out


def segment_mean(a: Matrix, seg, num_segments: int) -> Matrix:
    """Mean of rows per segment; each member row gets grad g_j / size_j.

    Every segment in [0, num_segments) must be non-empty.
    """
    from . import accel

    seg = np.asarray(seg, dtype=np.int64)
    if seg.shape[0] != a.rows:
        raise ShapeError(f"segment ids ({seg.shape[0]}) != rows ({a.rows})")
    counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ShapeError("segment_mean: empty segment")
    sums = accel.segment_sum(a.data, seg, num_segments)
    out = Matrix(sums / counts[:, None])
    _record(out, (a,), lambda g: ((g / counts[:, None])[seg],))
    return out


def cross_entropy_rows(logits: Matrix, targets) -> Matrix:
    """Mean cross-entropy of row-wise softmax against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    x = logits.data
    n = x.shape[0]
    if targets.shape[0] != n:
        raise ShapeError("cross_entropy_rows: target count mismatch")
    rowmax = x.max(axis=1, keepdims=True)
    e = np.exp(x - rowmax)
    lse = np.log(e.sum(axis=1)) + rowmax[:, 0]
    loss = float(np.mean(lse - x[np.arange(n), targets]))
    out = Matrix([[loss]])
    probs = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        d = probs.copy()
        d[np.arange(n), targets] -= 1.0
        return (d * (g[0, 0] / n),)

    _record(out, (logits,), backward)
    return out


# ---------------------------------------------------------------------------
# verification harness


def grad_check(fn, inputs, h: float = 1e-5, rel_tol: float = 1e-4, abs_floor: float = 1e-6):
    """Compare analytic gradients of sum(fn(*inputs)) with central differences.

    Returns a report dict with the max relative error per input and overall;
    `passed` applies rel_tol with abs_floor on the error denominator.
    """

    def forward_sum(mats):
        out = fn(*mats)
        return float(out.data.sum())

    with Tape() as tape:
        out = fn(*inputs)
        if not np.all(np.isfinite(out.data)):
            return {"passed": False, "max_rel_err": math.inf, "reason": "non-finite output"}
        tape.backward(sum_all(out))
        analytic = []
        for m in inputs:
            g = tape.grad(m)
            analytic.append(np.zeros_like(m.data) if g is None else g.copy())

    max_err = 0.0
    per_input = []
    for i, m in enumerate(inputs):
        base = m.data
        num = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            bumped = [Matrix(x.data.copy()) for x in inputs]
            bumped[i].data[idx] = base[idx] + h
            f_plus = forward_sum(bumped)
            bumped[i].data[idx] = base[idx] - h
            f_minus = forward_sum(bumped)
            num[idx] = (f_plus - f_minus) / (2.0 * h)
            it.iternext()
        if not np.all(np.isfinite(num)):
            return {"passed": False, "max_rel_err": math.inf, "reason": "non-finite finite-difference"}
        # |a - n| <= max(rel_tol * magnitude, abs_floor), expressed as a
        # relative error so max_rel_err <= rel_tol iff every entry passes
        mag = np.maximum(np.abs(analytic[i]), np.abs(num))
        denom = np.maximum(mag, abs_floor / rel_tol)
        err = float(np.max(np.abs(analytic[i] - num) / denom)) if base.size else 0.0
        per_input.append(err)
        max_err = max(max_err, err)

    return {"passed": max_err <= rel_tol, "max_rel_err": max_err, "per_input": per_input}
