"""Dense tensors with reverse-mode differentiation recorded on an explicit tape.

Conventions: float32 by default with a process-wide float64 switch for
finite-difference work; every op allocates a fresh buffer (no views escape);
a tape replays backward functions in exact reverse execution order, and
gradient accumulation is additive.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


# ---------------------------------------------------------------------------
# precision switch

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32


def set_default_dtype(kind) -> None:
    global _default_dtype
    if isinstance(kind, str):
        if kind not in _DTYPE_NAMES:
            raise ValueError(f"unknown dtype name {kind!r}; expected 'f32' or 'f64'")
        _default_dtype = _DTYPE_NAMES[kind]
    elif kind in (np.float32, np.float64):
        _default_dtype = np.dtype(kind).type
    else:
        raise ValueError(f"unsupported dtype {kind!r}")


def get_default_dtype():
    return _default_dtype


class precision:
    """Context manager that temporarily switches the default dtype."""

    def __init__(self, kind):
        self._kind = kind
        self._saved = None

    def __enter__(self):
        global _default_dtype
        self._saved = _default_dtype
        set_default_dtype(self._kind)
        return self

    def __exit__(self, *exc):
        global _default_dtype
        _default_dtype = self._saved
        return False


# ---------------------------------------------------------------------------
# tensor and tape

class Tensor:
    """A dense row-major float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return _result(self.data.copy(), False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars take the cheap constant path
    def __add__(self, other):
        return shift(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if _is_number(other) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _bad_item(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.data.shape}")


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def _active_tape():
    stack = getattr(_tls, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops, replayed newest-first by backward()."""

    __slots__ = ("_entries", "_consumed")

    def __init__(self):
        self._entries: list[Callable[[], None]] = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._entries.append(backward_fn)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate gradients into every input."""
        if self._consumed:
            raise RuntimeError("backward() already ran on this tape; record a new tape")
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a single-element loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._entries):
            fn()


def _result(arr: np.ndarray, requires_grad: bool) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = requires_grad
    t.grad = None
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    # additive accumulation; never mutates an existing grad buffer in place
    t.grad = g if t.grad is None else t.grad + g


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return _result(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad)


# ---------------------------------------------------------------------------
# broadcasting support (elementwise ops)

def _broadcast_compatible(sa, sb) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) == len(sb):
        return all(x == y or x == 1 or y == 1 for x, y in zip(sa, sb))
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    return big[len(big) - len(small):] == small


def _check_elementwise(name, a, b):
    if not _broadcast_compatible(a.data.shape, b.data.shape):
        raise DimensionError(f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _elementwise(name, a, b, fwd, da_fn, db_fn):
    _check_elementwise(name, a, b)
    ad, bd = a.data, b.data
    out = _result(fwd(ad, bd), a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, _unbroadcast(da_fn(g, ad, bd), ad.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(db_fn(g, ad, bd), bd.shape))
        tape.record(backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("add", a, b, lambda x, y: x + y,
                        lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("sub", a, b, lambda x, y: x - y,
                        lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("mul", a, b, lambda x, y: x * y,
                        lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Tensor, b: Tensor) -> Tensor:
    return _elementwise("div", a, b, lambda x, y: x / y,
                        lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _result(a.data * np.asarray(s, dtype=a.data.dtype), a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            if out.grad is not None:
                _accum(a, out.grad * np.asarray(s, dtype=a.data.dtype))
        tape.record(backward)
    return out


def shift(a: Tensor, s: float) -> Tensor:
    out = _result(a.data + np.asarray(float(s), dtype=a.data.dtype), a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            if out.grad is not None:
                _accum(a, out.grad)
        tape.record(backward)
    return out


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# matrix products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} x {bd.shape}")
    out = _result(ad @ bd, a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g @ bd.T)
            if b.requires_grad:
                _accum(b, ad.T @ g)
        tape.record(backward)
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading axis: (B,n,k) x (B,k,m) -> (B,n,m)."""
    ad, bd = a.data, b.data
    if ad.ndim != 3 or bd.ndim != 3 or ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
        raise DimensionError(f"bmm: incompatible shapes {ad.shape} x {bd.shape}")
    out = _result(np.matmul(ad, bd), a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, np.matmul(g, bd.swapaxes(-1, -2)))
            if b.requires_grad:
                _accum(b, np.matmul(ad.swapaxes(-1, -2), g))
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# nonlinearities

def relu(a: Tensor) -> Tensor:
    ad = a.data
    out = _result(np.maximum(ad, 0), a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            if out.grad is not None:
                _accum(a, out.grad * (ad > 0))
        tape.record(backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Overflow-safe logistic; outputs clamped into the open interval (0, 1)."""
    ad = a.data
    e = np.exp(-np.abs(ad))
    y = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    info = np.finfo(ad.dtype)
    np.clip(y, info.tiny, 1.0 - info.epsneg, out=y)
    out = _result(y, a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            if out.grad is not None:
                _accum(a, _sigmoid_grad(y, out.grad))
        tape.record(backward)
    return out


def _sigmoid_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (1.0 - y) * g


def softmax_lastdim(a: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax over the last dim; optional constant pre-softmax bias."""
    x = a.data
    if additive_mask is not None:
        x = x + additive_mask
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            dot = (g * y).sum(axis=-1, keepdims=True)
            _accum(a, y * (g - dot))
        tape.record(backward)
    return out


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dim to zero mean / unit variance, then affine."""
    xd = a.data
    d = xd.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layernorm: gain/bias shapes {gain.data.shape}/{bias.data.shape} do not match last dim {d}")
    if eps <= 0:
        raise ValueError("layernorm: eps must be positive")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = xc * inv
    out = _result(xhat * gain.data + bias.data, a.requires_grad or gain.requires_grad or bias.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            if gain.requires_grad:
                _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            if bias.requires_grad:
                _accum(bias, g.reshape(-1, d).sum(axis=0))
            if a.requires_grad:
                dxhat = g * gain.data
                term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                _accum(a, inv * term)
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# dropout (inverted; eval path is the identity)

_dropout_rng = np.random.default_rng(0)


def seed_dropout(seed: int) -> None:
    global _dropout_rng
    _dropout_rng = np.random.default_rng(seed)


def dropout(a: Tensor, p: float, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        out = _result(a.data.copy(), a.requires_grad)
        tape = _active_tape()
        if tape is not None and out.requires_grad:
            def backward():
                if out.grad is not None:
                    _accum(a, out.grad)
            tape.record(backward)
        return out
    keep = (_dropout_rng.random(a.data.shape) >= p).astype(a.data.dtype)
    keep *= np.asarray(1.0 / (1.0 - p), dtype=a.data.dtype)
    out = _result(a.data * keep, a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            if out.grad is not None:
                _accum(a, out.grad * keep)
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(a: Tensor, shape) -> Tensor:
    out = _result(a.data.reshape(shape).copy(), a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            if out.grad is not None:
                _accum(a, out.grad.reshape(a.data.shape))
        tape.record(backward)
    return out


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.data.size,))


def transpose_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise DimensionError(f"transpose_last2: needs rank >= 2, got shape {a.data.shape}")
    out = _result(np.ascontiguousarray(a.data.swapaxes(-1, -2)), a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            if out.grad is not None:
                _accum(a, out.grad.swapaxes(-1, -2))
        tape.record(backward)
    return out


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise DimensionError(f"permute: axes {axes} invalid for shape {a.data.shape}")
    inv = np.argsort(axes)
    out = _result(np.ascontiguousarray(a.data.transpose(axes)), a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            if out.grad is not None:
                _accum(a, out.grad.transpose(inv))
        tape.record(backward)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValueError("concat: needs at least one tensor")
    shapes = [p.data.shape for p in parts]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(i != axis and s[i] != ref[i] for i in range(len(ref))):
            raise DimensionError(f"concat: shapes {shapes} disagree off axis {axis}")
    out = _result(np.concatenate([p.data for p in parts], axis=axis),
                  any(p.requires_grad for p in parts))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)

        def backward():
            g = out.grad
            if g is None:
                return
            for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if part.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accum(part, g[tuple(idx)])
        tape.record(backward)
    return out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    shape = a.data.shape
    if not (0 <= axis < len(shape)) or not (0 <= start and start + length <= shape[axis]):
        raise DimensionError(f"narrow: slice [{start}:{start + length}) axis {axis} invalid for {shape}")
    idx = [slice(None)] * len(shape)
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = _result(a.data[idx].copy(), a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            if out.grad is not None:
                buf = np.zeros_like(a.data)
                buf[idx] = out.grad
                _accum(a, buf)
        tape.record(backward)
    return out


def gather_rows(a: Tensor, indices, unique: bool = False) -> Tensor:
    """Select rows along axis 0. `unique=True` promises no repeated index,
    which lets backward scatter by assignment instead of add.at."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {a.data.shape[0]} rows")
    out = _result(a.data[idx], a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            buf = np.zeros_like(a.data)
            if unique:
                buf[idx] = g
            else:
                np.add.at(buf, idx, g)
            _accum(a, buf)
        tape.record(backward)
    return out


# ---------------------------------------------------------------------------
# selection and reductions

def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select by a constant boolean mask (same shape as operands)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.data.shape or a.data.shape != b.data.shape:
        raise DimensionError(
            f"where: mask {mask.shape}, operands {a.data.shape}/{b.data.shape} must all match")
    out = _result(np.where(mask, a.data, b.data), a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            if a.requires_grad:
                _accum(a, g * mask)
            if b.requires_grad:
                _accum(b, g * ~mask)
        tape.record(backward)
    return out


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand."""
    return where(a.data >= b.data, a, b)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties route the gradient to the first operand."""
    return where(a.data <= b.data, a, b)


def sum_all(a: Tensor) -> Tensor:
    out = _result(np.asarray(a.data.sum(), dtype=a.data.dtype), a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def backward():
            if out.grad is not None:
                _accum(a, np.broadcast_to(out.grad, a.data.shape).copy())
        tape.record(backward)
    return out


def pool2x2(a: Tensor, mode: str = "mean") -> Tensor:
    """2x2 stride-2 pooling of an (H, W, C) map. Max routes gradient to the
    first (row-major within window) argmax; mean splits it by 1/4."""
    if a.data.ndim != 3:
        raise DimensionError(f"pool2x2: needs (H, W, C), got shape {a.data.shape}")
    h, w, c = a.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"pool2x2: H and W must be even, got ({h}, {w})")
    ho, wo = h // 2, w // 2
    windows = a.data.reshape(ho, 2, wo, 2, c).transpose(0, 2, 1, 3, 4).reshape(ho, wo, 4, c)
    tape = _active_tape()
    if mode == "mean":
        out = _result(windows.mean(axis=2), a.requires_grad)
        if tape is not None and out.requires_grad:
            def backward():
                g = out.grad
                if g is None:
                    return
                up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
                _accum(a, up * np.asarray(0.25, dtype=g.dtype))
            tape.record(backward)
        return out
    if mode == "max":
        arg = windows.argmax(axis=2)
        out = _result(np.take_along_axis(windows, arg[:, :, None, :], axis=2)[:, :, 0, :],
                      a.requires_grad)
        if tape is not None and out.requires_grad:
            def backward():
                g = out.grad
                if g is None:
                    return
                buf = np.zeros((ho, wo, 4, c), dtype=g.dtype)
                np.put_along_axis(buf, arg[:, :, None, :], g[:, :, None, :], axis=2)
                _accum(a, buf.reshape(ho, wo, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c))
            tape.record(backward)
        return out
    raise ValueError(f"pool2x2: unknown mode {mode!r}")


def reduce_spatial(a: Tensor, mode: str = "mean") -> Tensor:
    """Collapse all spatial positions of an (H, W, C) map to a (C,) vector."""
    if a.data.ndim != 3:
        raise DimensionError(f"reduce_spatial: needs (H, W, C), got shape {a.data.shape}")
    h, w, c = a.data.shape
    flat = a.data.reshape(h * w, c)
    tape = _active_tape()
    if mode == "mean":
        out = _result(flat.mean(axis=0), a.requires_grad)
        if tape is not None and out.requires_grad:
            def backward():
                g = out.grad
                if g is None:
                    return
                _accum(a, np.broadcast_to(g / (h * w), (h * w, c)).reshape(h, w, c).copy())
            tape.record(backward)
        return out
    if mode == "max":
        arg = flat.argmax(axis=0)
        out = _result(flat[arg, np.arange(c)], a.requires_grad)
        if tape is not None and out.requires_grad:
            def backward():
                g = out.grad
                if g is None:
                    return
                buf = np.zeros((h * w, c), dtype=g.dtype)
                buf[arg, np.arange(c)] = g
                _accum(a, buf.reshape(h, w, c))
            tape.record(backward)
        return out
    raise ValueError(f"reduce_spatial: unknown mode {mode!r}")
