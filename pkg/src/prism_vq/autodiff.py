"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Forward passes record primitive operations onto an explicit tape; ``backward``
replays the tape once in reverse, accumulating vector-Jacobian products into
``Tensor.grad``. Only the shapes this model family needs are supported: there
is no general broadcasting machinery beyond elementwise ops, row-wise bias
adds, and the batched matmul variants used by the encoders.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

DEFAULT_DTYPE = np.float64

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_TWO_OVER_SQRT_PI = 2.0 / np.sqrt(np.pi)


class GradientError(ValueError):
    """Contract violation in the differentiation machinery."""


class _OpRecord:
    __slots__ = ("out", "inputs", "vjp", "node_id")

    def __init__(self, out: "Tensor", inputs: tuple["Tensor", ...],
                 vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.node_id = -1


class Tape:
    """Ordered record of primitives; inputs of every op precede it."""

    def __init__(self):
        self.ops: list[_OpRecord] = []

    def record(self, op: _OpRecord) -> int:
        op.node_id = len(self.ops)
        self.ops.append(op)
        return op.node_id

    def __len__(self) -> int:
        return len(self.ops)


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextlib.contextmanager
def tape():
    """Activate a fresh tape for the duration of the block and yield it."""
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


class Tensor:
    """Dense n-dimensional value with an optional gradient buffer.

    ``requires_grad`` marks differentiable leaves (parameters, probed inputs).
    Tensors produced by primitives under an active tape inherit the flag from
    their inputs; without an active tape every result is a constant.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype or DEFAULT_DTYPE)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def parameter(values, dtype=None) -> Tensor:
    """Leaf tensor that participates in gradient accumulation."""
    return Tensor(values, requires_grad=True, dtype=dtype)


def constant(values, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=False, dtype=dtype)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    t = active_tape()
    needs = t is not None and any(i.requires_grad for i in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = needs
    out.node_id = -1
    if needs:
        out.node_id = t.record(_OpRecord(out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise primitives ----------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.values + b.values

    def vjp(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return _make(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.values - b.values

    def vjp(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)

    return _make(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.values * b.values

    def vjp(g):
        return (_unbroadcast(g * b.values, a.values.shape),
                _unbroadcast(g * a.values, b.values.shape))

    return _make(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.values / b.values

    def vjp(g):
        return (_unbroadcast(g / b.values, a.values.shape),
                _unbroadcast(-g * a.values / (b.values * b.values), b.values.shape))

    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, (a,), lambda g: (-g,))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.values), (a,), lambda g: (g / a.values,))


def tsqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.values)
    return _make(out, (a,), lambda g: (g * (0.5 / out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.values))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def erf(a: Tensor) -> Tensor:
    out = _erf(a.values)

    def vjp(g):
        return (g * _TWO_OVER_SQRT_PI * np.exp(-a.values * a.values),)

    return _make(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x)."""
    x = a.values
    phi_cdf = 0.5 * (1.0 + _erf(x / _SQRT2))
    out = x * phi_cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (phi_cdf + x * pdf),)

    return _make(out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.values)

    def vjp(g):
        return (g / (1.0 + np.exp(-a.values)),)

    return _make(out, (a,), vjp)


# -- reductions ------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.values.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.values.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.values.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.values.size
    else:
        count = a.values.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.values.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.values.shape).copy(),)

    return _make(out, (a,), vjp)


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D @ 2D, 2D @ 1D, or 1D @ 2D matrix product."""
    out = a.values @ b.values

    def vjp(g):
        av, bv = a.values, b.values
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return g @ bv.T, np.outer(av, g)
        raise GradientError(f"unsupported matmul ranks {av.ndim} @ {bv.ndim}")

    return _make(out, (a, b), vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul (B, m, k) @ (B, k, n)."""
    out = a.values @ b.values

    def vjp(g):
        return g @ b.values.swapaxes(-1, -2), a.values.swapaxes(-1, -2) @ g

    return _make(out, (a, b), vjp)


def channel_map(x: Tensor, w: Tensor) -> Tensor:
    """Pointwise channel mixing: (B, C_in, L) x (C_out, C_in) -> (B, C_out, L)."""
    out = np.einsum("bcl,oc->bol", x.values, w.values, optimize=True)

    def vjp(g):
        dx = np.einsum("bol,oc->bcl", g, w.values, optimize=True)
        dw = np.einsum("bol,bcl->oc", g, x.values, optimize=True)
        return dx, dw

    return _make(out, (x, w), vjp)


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.values.reshape(shape), (a,),
                 lambda g: (g.reshape(a.values.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.values.transpose(axes), (a,),
                 lambda g: (g.transpose(inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    out = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.values.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i in range(len(parts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, parts, vjp)


def take(a: Tensor, idx) -> Tensor:
    out = a.values[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def vjp(g):
        da = np.zeros_like(a.values)
        np.add.at(da, idx, g)
        return (da,)

    return _make(out, (a,), vjp)


def pad1d(a: Tensor, left: int, right: int, mode: str = "zero") -> Tensor:
    """Pad the last axis with zeros or replicated edge values."""
    width = [(0, 0)] * (a.values.ndim - 1) + [(left, right)]
    if mode == "zero":
        out = np.pad(a.values, width)
    elif mode == "edge":
        out = np.pad(a.values, width, mode="edge")
    else:
        raise GradientError(f"unknown pad mode {mode!r}")
    L = a.values.shape[-1]

    def vjp(g):
        core = g[..., left:left + L]
        if mode == "zero":
            return (core,)
        da = core.copy()
        if left:
            da[..., 0] += g[..., :left].sum(axis=-1)
        if right:
            da[..., -1] += g[..., left + L:].sum(axis=-1)
        return (da,)

    return _make(out, (a,), vjp)


def zero_interleave(a: Tensor, stride: int) -> Tensor:
    """Insert stride-1 zeros between entries of the last axis."""
    L = a.values.shape[-1]
    out_len = stride * (L - 1) + 1
    out = np.zeros(a.values.shape[:-1] + (out_len,), dtype=a.values.dtype)
    out[..., ::stride] = a.values
    return _make(out, (a,), lambda g: (g[..., ::stride].copy(),))


# -- normalizing nonlinearities ------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), vjp)


def normalize(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization along ``axis``.

    The variance is floored at ``eps`` (constant slices normalize to zero);
    above the floor the output variance is exactly 1 before any affine.
    """
    mu = a.values.mean(axis=axis, keepdims=True)
    var = a.values.var(axis=axis, keepdims=True)
    live = var > eps
    inv = 1.0 / np.sqrt(np.maximum(var, eps))
    out = (a.values - mu) * inv

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * out).mean(axis=axis, keepdims=True)
        # below the floor the scale is a constant, so the curvature term drops
        return ((g - gm - np.where(live, out * gy, 0.0)) * inv,)

    return _make(out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, axis: int = -1,
               eps: float = 1e-5) -> Tensor:
    """Normalize along ``axis`` then apply the affine (gain, bias)."""
    return add(mul(normalize(a, axis=axis, eps=eps), gain), bias)


# -- gradient routing ----------------------------------------------------------

def stop_gradient(a: Tensor) -> Tensor:
    """Treat ``a`` as a constant from here on."""
    return Tensor(a.values, requires_grad=False)


def straight_through(z: Tensor, z_q: Tensor) -> Tensor:
    """Forward the quantized values; route the incoming gradient to ``z`` only."""
    if z.values.shape != z_q.values.shape:
        raise GradientError("straight_through requires equal shapes")
    return _make(z_q.values.copy(), (z, z_q), lambda g: (g, None))


def gaussian_reparameterize(mu: Tensor, sigma: Tensor, rng: np.random.Generator) -> Tensor:
    """Sample mu + eps * sigma with eps ~ N(0, I); gradients flow to mu and sigma."""
    eps = constant(rng.standard_normal(mu.values.shape))
    return add(mu, mul(eps, sigma))


def dropout(a: Tensor, rate: float, rng: np.random.Generator,
            training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return a
    keep = rng.random(a.values.shape) >= rate
    mask = constant(keep.astype(a.values.dtype) / (1.0 - rate))
    return mul(a, mask)


# -- backward pass --------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the active tape.

    Repeated calls without a grad reset keep accumulating. Tensors not
    reachable from ``loss`` (constants, detached values) are untouched.
    """
    t = active_tape()
    if t is None:
        raise GradientError("backward() requires an active tape")
    if loss.values.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.values.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    if loss.node_id < 0:
        # constant loss: nothing reachable
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.values)
        return
    for op in reversed(t.ops[:loss.node_id + 1]):
        g = adjoint.get(id(op.out))
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gi
            else:
                adjoint[key] = gi
        # write-back for the op output itself
        if op.out.grad is None:
            op.out.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            op.out.grad = op.out.grad + g
        adjoint.pop(id(op.out), None)
    # leaves: whatever is left in the adjoint map
    seen: set[int] = set()
    for op in t.ops[:loss.node_id + 1]:
        for inp in op.inputs:
            key = id(inp)
            if key in adjoint and key not in seen:
                seen.add(key)
                if inp.grad is None:
                    inp.grad = adjoint[key].copy()
                else:
                    inp.grad = inp.grad + adjoint[key]


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
