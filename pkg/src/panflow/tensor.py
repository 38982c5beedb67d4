"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Activations use the N x C x H x W layout. Ops are plain functions over
:class:`Tensor`; when a :class:`GradTape` is active and an input requires a
gradient, the op appends a record (output, inputs, vjp) to the tape.
:func:`backward` replays that record list in reverse and accumulates into
every reachable :class:`Parameter`.

Without an active tape every op is pure, so inference can run concurrently
on distinct inputs. A tape and the parameters it touches belong to a single
training step and must not be shared between threads.
"""
import threading

import numpy as np

from .errors import NumericOverflowError, ShapeError

__all__ = [
    "Tensor", "Parameter", "GradTape", "backward", "zero_grads",
    "set_check_finite", "as_tensor",
    "add", "sub", "mul", "neg", "exp", "arctan", "square", "absolute",
    "leaky_relu", "soft_clamp", "sum", "mean",
    "conv2d", "instance_norm", "channel_split", "channel_concat",
    "upsample_nearest", "reverse_channels",
]

_state = threading.local()
_CHECK_FINITE = True


def set_check_finite(flag):
    """Toggle the NaN/Inf guard run after every op. Returns the old value."""
    global _CHECK_FINITE
    old, _CHECK_FINITE = _CHECK_FINITE, bool(flag)
    return old


def _active_tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable wrapper around a floating point ndarray."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by exp(-s) instead")
        return mul(self, 1.0 / other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def exp(self):
        return exp(self)


class Parameter(Tensor):
    """Trainable tensor with a gradient buffer and a slash-separated name."""

    __slots__ = ("grad", "name")

    def __init__(self, value, name=""):
        super().__init__(np.array(value, copy=True), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def assign(self, value):
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {value.shape} to {self.data.shape}")
        self.data = value.copy()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(params):
    for p in params:
        p.zero_grad()


class GradTape:
    """Ordered record of the differentiable ops executed inside ``with tape:``."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss):
        backward(loss, self)


def backward(loss, tape):
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable parameter.

    Each record is visited once, last to first. A tensor that feeds several
    consumers receives the sum of their contributions.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, inputs, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in inputs)
        for t, gi in zip(inputs, vjp(g, needs)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if isinstance(t, Parameter):
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, p in leaves.items():
        p.grad = p.grad + grads[key]


def _make(data, inputs, vjp, where):
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NumericOverflowError(where)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.records.append((out, inputs, vjp))
        return out
    return Tensor(data)


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise -----------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = b
        return _make(a.data + c, (a,), lambda g, needs: (g,), "add")
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g, needs: (g, g), "add")


def sub(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g, needs: (g, -g), "sub")


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = b
        return _make(a.data * c, (a,), lambda g, needs: (g * c,), "mul")
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g, needs):
        return (g * bd if needs[0] else None, g * ad if needs[1] else None)

    return _make(ad * bd, (a, b), vjp, "mul")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, needs: (-g,), "neg")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g, needs: (g * out,), "exp")


def arctan(a):
    a = as_tensor(a)
    x = a.data
    return _make(np.arctan(x), (a,), lambda g, needs: (g / (1.0 + x * x),), "arctan")


def square(a):
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g, needs: (2.0 * g * x,), "square")


def absolute(a):
    a = as_tensor(a)
    x = a.data
    return _make(np.abs(x), (a,), lambda g, needs: (g * np.sign(x),), "abs")


def leaky_relu(a, alpha=0.2):
    a = as_tensor(a)
    one, low = np.ones((), a.dtype), np.asarray(alpha, a.dtype)
    slope = np.where(a.data >= 0, one, low)
    return _make(a.data * slope, (a,), lambda g, needs: (g * slope,), "leaky_relu")


def soft_clamp(a, bound):
    """bound * (2/pi) * arctan(a / bound): smooth map onto (-bound, bound)."""
    a = as_tensor(a)
    u = a.data / bound
    out = (bound * 2.0 / np.pi) * np.arctan(u)
    return _make(out, (a,), lambda g, needs: (g * (2.0 / np.pi) / (1.0 + u * u),), "soft_clamp")


# --- reductions ------------------------------------------------------------

def _expand_back(g, shape, axis):
    if axis is not None:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        g = np.expand_dims(g, tuple(ax % len(shape) for ax in axes))
    return np.broadcast_to(g, shape)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis)
    return _make(np.asarray(out), (a,), lambda g, needs: (_expand_back(g, shape, axis),), "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    out = np.mean(a.data, axis=axis)
    count = a.data.size // max(np.asarray(out).size, 1)
    return _make(
        np.asarray(out), (a,),
        lambda g, needs: (_expand_back(g, shape, axis) / count,), "mean",
    )


# --- convolution and normalisation -----------------------------------------

def _pad_flat(x, pad):
    """Zero-pad H and W by ``pad`` and flatten the plane, with 2*pad slack at the end.

    A kernel tap (a, b) then reads the contiguous slice starting at
    ``a * (W + 2 pad) + b``; outputs land on an H x (W + 2 pad) grid whose
    last 2*pad columns are discarded.
    """
    n, c, h, w = x.shape
    wp = w + 2 * pad
    flat = np.zeros((n, c, (h + 2 * pad) * wp + 2 * pad), dtype=x.dtype)
    flat[:, :, :(h + 2 * pad) * wp].reshape(n, c, h + 2 * pad, wp)[:, :, pad:pad + h, pad:pad + w] = x
    return flat


def _im2col(flat, k, wp, m):
    n, c, _ = flat.shape
    cols = np.empty((n, k * k * c, m), dtype=flat.dtype)
    for a in range(k):
        for b in range(k):
            t = a * k + b
            off = a * wp + b
            cols[:, t * c:(t + 1) * c] = flat[:, :, off:off + m]
    return cols


def _correlate(x, w):
    """Same-size, stride-1 cross-correlation of NCHW ``x`` with OIkk ``w``.

    With few input channels the taps are gathered first (im2col) and a single
    GEMM follows; with few output channels one GEMM computes every tap's
    response on the padded grid and the shifted responses are summed. Returns
    the output plus whatever the weight gradient can reuse.
    """
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad = k // 2
    wp = wd + 2 * pad
    m = h * wp
    flat = _pad_flat(x, pad)
    dtype = np.result_type(x, w)
    if c <= o:
        cols = _im2col(flat, k, wp, m)
        out = np.matmul(w.transpose(0, 2, 3, 1).reshape(o, k * k * c).astype(dtype), cols)
        saved = ("cols", cols)
    else:
        resp = np.matmul(w.transpose(2, 3, 0, 1).reshape(k * k * o, c).astype(dtype), flat)
        out = np.zeros((n, o, m), dtype=dtype)
        for a in range(k):
            for b in range(k):
                t = a * k + b
                off = a * wp + b
                out += resp[:, t * o:(t + 1) * o, off:off + m]
        saved = ("flat", flat)
    out = out.reshape(n, o, h, wp)[:, :, :, :wd]
    return np.ascontiguousarray(out), saved


def _weight_grad(g, saved, k):
    n, o, h, wd = g.shape
    pad = k // 2
    wp = wd + 2 * pad
    m = h * wp
    grid = np.zeros((n, o, m), dtype=g.dtype)
    grid.reshape(n, o, h, wp)[:, :, :, :wd] = g
    kind, arr = saved
    c = arr.shape[1] // (k * k) if kind == "cols" else arr.shape[1]
    if kind == "cols":
        acc = np.zeros((o, k * k * c), dtype=np.result_type(g, arr))
        for i in range(n):
            acc += grid[i] @ arr[i].T
        return acc.reshape(o, k, k, c).transpose(0, 3, 1, 2)
    # scatter the output gradient to every tap offset, then one GEMM per sample
    shifted = np.zeros((n, k * k * o, arr.shape[2]), dtype=g.dtype)
    for a in range(k):
        for b in range(k):
            t = a * k + b
            off = a * wp + b
            shifted[:, t * o:(t + 1) * o, off:off + m] = grid
    acc = np.zeros((k * k * o, c), dtype=np.result_type(g, arr))
    for i in range(n):
        acc += shifted[i] @ arr[i].T
    return acc.reshape(k, k, o, c).transpose(2, 3, 0, 1)


def conv2d(x, w, b=None):
    """2-D cross-correlation with zero padding (k-1)/2 and stride 1."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d needs a square odd kernel, got {kh}x{kw}")
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")

    out, saved = _correlate(x.data, w.data)
    if b is not None:
        out += b.data[None, :, None, None]
    wd_ = w.data

    def vjp(g, needs):
        gx = gw = gb = None
        if needs[0]:
            flipped = np.ascontiguousarray(wd_.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            gx = _correlate(g, flipped)[0]
        if needs[1]:
            gw = np.ascontiguousarray(_weight_grad(g, saved, kh))
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, vjp, "conv2d")


def instance_norm(x, eps=1e-5):
    """Per-sample, per-channel standardisation over the H x W plane (no affine)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects N x C x H x W, got {x.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xc = x.data - x.data.mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + eps)
    y = xc * inv

    def vjp(g, needs):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gy = (g * y).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (x,), vjp, "instance_norm")


# --- layout ----------------------------------------------------------------

def _slice_channels(x, lo, hi):
    shape, dtype = x.shape, x.dtype

    def vjp(g, needs):
        full = np.zeros(shape, dtype=dtype)
        full[:, lo:hi] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[:, lo:hi]), (x,), vjp, "channel_split")


def channel_split(x, at):
    """Split along axis 1 into ``[:at]`` and ``[at:]``."""
    x = as_tensor(x)
    c = x.shape[1]
    if not 0 < at < c:
        raise ShapeError(f"split index {at} must lie strictly between 0 and {c}")
    return _slice_channels(x, 0, at), _slice_channels(x, at, c)


def channel_concat(*parts):
    parts = [as_tensor(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"channel_concat: cannot join {ref} with {p.shape}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g, needs):
        return tuple(g[:, bounds[i]:bounds[i + 1]] if needs[i] else None for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp, "channel_concat")


def upsample_nearest(x, factor):
    x = as_tensor(x)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def vjp(g, needs):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), vjp, "upsample_nearest")


def reverse_channels(x):
    """Channel-order reversal: volume preserving and its own inverse."""
    x = as_tensor(x)
    return _make(
        np.ascontiguousarray(x.data[:, ::-1]), (x,),
        lambda g, needs: (np.ascontiguousarray(g[:, ::-1]),), "reverse_channels",
    )
