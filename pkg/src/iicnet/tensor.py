"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward rule on the output
tensor; :meth:`Tensor.backward` replays the rules in reverse topological
order.  A graph is built once and consumed once: after ``backward`` the
intermediate nodes drop their links and a second call raises
:class:`GraphConsumedError`.

Spatial operations use the channel axis ``-3`` and accept any number of
leading (batch) axes, so ``(C, H, W)`` and ``(B, C, H, W)`` both work.
"""
from __future__ import annotations

import contextlib
import functools
import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphConsumedError(RuntimeError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording a graph."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(data: np.ndarray, what: str) -> None:
    # a finite sum rules out nan/inf cheaply; an overflowing sum falls back to the full scan
    if not math.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out._op = op
        out._consumed = False
        out.grad = None
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def exp(self):
        return exp(self)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if self._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward()")
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("tensor does not depend on any requires_grad leaf")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            if g is not None:
                pgrads = node._backward(g)
                for p, pg in zip(node._parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._parents = ()
            node._backward = None
            node._consumed = True


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.full(like.shape, x, dtype=DTYPE))
    return Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._result(a.data + c, (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._result(a.data - c, (a,), lambda g: (g,), "sub")
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "mul")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"exp": exp, "neg": neg}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch one of ``add, sub, mul, exp, neg`` by name."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def centered_sigmoid(a: Tensor) -> Tensor:
    """``2 * sigmoid(a) - 1``, computed as ``tanh(a / 2)``."""
    t = np.tanh(0.5 * a.data)
    return Tensor._result(t, (a,), lambda g: (g * 0.5 * (1.0 - t * t),), "centered_sigmoid")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = np.where(a.data > 0, 1.0, slope)
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "leaky_relu")


def absolute(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sgn,), "abs")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero where the input lies outside."""
    inside = ((a.data >= lo) & (a.data <= hi)).astype(DTYPE)
    return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------- reductions


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return Tensor._result(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


# ---------------------------------------------------------------- structure


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    lead = parts[0].shape[:-3] + parts[0].shape[-2:]
    for p in parts:
        if p.ndim < 3 or p.shape[:-3] + p.shape[-2:] != lead:
            raise ValueError(f"concat_channels: incompatible shapes {[q.shape for q in parts]}")
    sizes = [p.shape[-3] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, bounds, axis=-3)

    return Tensor._result(np.concatenate([p.data for p in parts], axis=-3), tuple(parts), backward, "concat")


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[-3]
    if not 0 <= start < stop <= n:
        raise ValueError(f"invalid channel slice [{start}:{stop}] of {n}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[..., start:stop, :, :] = g
        return (full,)

    return Tensor._result(a.data[..., start:stop, :, :].copy(), (a,), backward, "slice")


def split_channels(a: Tensor, at: int) -> tuple[Tensor, Tensor]:
    n = a.shape[-3]
    if not 0 < at < n:
        raise ValueError(f"split index {at} outside (0, {n})")
    return channel_slice(a, 0, at), channel_slice(a, at, n)


def chunk_channels(a: Tensor, parts: int) -> list[Tensor]:
    n = a.shape[-3]
    if parts <= 0 or n % parts:
        raise ValueError(f"cannot split {n} channels into {parts} equal parts")
    step = n // parts
    if parts == 1:
        return [a]
    return [channel_slice(a, i * step, (i + 1) * step) for i in range(parts)]


# ---------------------------------------------------------------- linear maps


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def channel_mix(w: Tensor, x: Tensor) -> Tensor:
    """Per-pixel ``y[..., i, h, w] = sum_j W[i, j] x[..., j, h, w]`` (a 1x1 convolution)."""
    m = w.shape[0]
    if w.shape != (m, x.shape[-3]):
        raise ValueError(f"channel_mix: weight {w.shape} vs input channels {x.shape[-3]}")
    shape = x.shape
    xr = x.data.reshape(shape[:-2] + (-1,))
    wd = w.data

    def backward(g):
        gr = g.reshape(xr.shape[:-2] + (m, -1))
        gx = (wd.T @ gr).reshape(shape)
        gw = np.einsum("bip,bjp->ij", gr.reshape(-1, m, gr.shape[-1]), xr.reshape(-1, xr.shape[-2], xr.shape[-1]))
        return gw, gx

    return Tensor._result((wd @ xr).reshape(shape[:-3] + (m,) + shape[-2:]), (w, x), backward, "channel_mix")


def triangular_inverse(t: Tensor, lower: bool, unit_diagonal: bool = False) -> Tensor:
    """Inverse of a triangular matrix by back-substitution."""
    from scipy.linalg import solve_triangular

    n = t.shape[0]
    inv = solve_triangular(t.data, np.eye(n), lower=lower, unit_diagonal=unit_diagonal)
    mask = np.tril(np.ones((n, n))) if lower else np.triu(np.ones((n, n)))
    if unit_diagonal:
        mask -= np.eye(n)

    def backward(g):
        return ((-inv.T @ g @ inv.T) * mask,)

    return Tensor._result(inv, (t,), backward, "triangular_inverse")


# ---------------------------------------------------------------- convolution


def _as_batch(x: np.ndarray) -> np.ndarray:
    return x.reshape((-1,) + x.shape[-3:])


_IM2COL_LIMIT = 100_000


def _conv_same(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-padded stride-1 cross-correlation, ``x (B, Ci, H, W)``, ``w (Co, Ci, k, k)``.

    The padded batch is laid out channel-major and flattened, so each kernel
    tap is a single GEMM against a shifted contiguous window.  Returns the
    output and the flattened padded input (reused for the weight gradient).
    """
    b, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    hp, wp = h + 2 * p, wd + 2 * p
    n = b * hp * wp
    flat = np.zeros((ci, n + (k - 1) * (wp + 1)), dtype=DTYPE)
    flat[:, :n].reshape(ci, b, hp, wp)[:, :, p:p + h, p:p + wd] = x.transpose(1, 0, 2, 3)
    if k * k * ci * n <= _IM2COL_LIMIT:
        # small inputs: one GEMM over an explicit column buffer beats k*k small ones
        s0, s1 = flat.strides
        cols = as_strided(flat, (k, k, ci, n), (wp * s1, s1, s0, s1)).reshape(k * k * ci, n)
        out = w.transpose(0, 2, 3, 1).reshape(co, -1) @ cols
    else:
        taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        out = np.zeros((co, n), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                off = i * wp + j
                out += taps[i, j] @ flat[:, off:off + n]
    out = out.reshape(co, b, hp, wp)[:, :, :h, :wd].transpose(1, 0, 2, 3)
    return out, flat


def _conv_weight_grad(g: np.ndarray, flat: np.ndarray, k: int) -> np.ndarray:
    b, co, h, wd = g.shape
    p = k // 2
    hp, wp = h + 2 * p, wd + 2 * p
    n = b * hp * wp
    gp = np.zeros((co, b, hp, wp), dtype=DTYPE)
    gp[:, :, :h, :wd] = g.transpose(1, 0, 2, 3)
    gp = gp.reshape(co, n)
    gw = np.empty((co, flat.shape[0], k, k), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            gw[:, :, i, j] = gp @ flat[:, off:off + n].T
    return gw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-size 2-D cross-correlation with zero padding ``(k - 1) / 2``."""
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ValueError(f"conv2d: kernel must be (Co, Ci, k, k) with odd k, got {w.shape}")
    if x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise ValueError(f"conv2d: input channels {x.shape[-3:]} do not match kernel {w.shape}")
    co, k = w.shape[0], w.shape[2]
    if b is not None and b.shape != (co,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({co},)")
    shape = x.shape
    xb = _as_batch(x.data)
    out, flat = _conv_same(xb, w.data)
    if b is not None:
        out += b.data[:, None, None]
    out = out.reshape(shape[:-3] + out.shape[1:])
    wd = w.data

    def backward(g):
        gb = _as_batch(g)
        gx = None
        if x.requires_grad:
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv_same(gb, flipped)[0].reshape(shape)
        gw = _conv_weight_grad(gb, flat, k) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, gb.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------- Fourier


@dataclass
class ComplexGrid:
    real: Tensor
    imag: Tensor

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError("real and imaginary parts must share a shape")

    @property
    def shape(self):
        return self.real.shape

    def to_numpy(self) -> np.ndarray:
        return self.real.data + 1j * self.imag.data


@functools.lru_cache(maxsize=32)
def _dft_tables(h: int, w: int):
    rows = np.arange(h)
    cols = np.arange(w)
    half = np.arange(w // 2 + 1)
    ang_h = 2.0 * np.pi * np.outer(rows, rows) / h
    ang_w = 2.0 * np.pi * np.outer(cols, half) / w
    return np.cos(ang_h), np.sin(ang_h), np.cos(ang_w), np.sin(ang_w)


def _left(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.matmul(mat, x)


def dft2_onesided(x: Tensor) -> ComplexGrid:
    """Unnormalized 2-D DFT over the last two axes, keeping ``W // 2 + 1`` columns.

    ``F[u, v] = sum_{m, n} x[m, n] exp(-2 pi i (u m / H + v n / W))``
    evaluated directly as products with cosine and sine tables.
    """
    if x.ndim < 2:
        raise ValueError("dft2_onesided needs at least two axes")
    h, w = x.shape[-2:]
    ch, sh, cw, sw = _dft_tables(h, w)
    xd = x.data
    a_c = _left(ch, xd)
    a_s = _left(sh, xd)
    re = a_c @ cw - a_s @ sw
    im = -(a_c @ sw + a_s @ cw)

    # tables are symmetric in the row transform, so their transposes are themselves
    def back_re(g):
        return (_left(ch, g @ cw.T) - _left(sh, g @ sw.T),)

    def back_im(g):
        return (-(_left(ch, g @ sw.T) + _left(sh, g @ cw.T)),)

    return ComplexGrid(
        Tensor._result(re, (x,), back_re, "dft_real"),
        Tensor._result(im, (x,), back_im, "dft_imag"),
    )


# ---------------------------------------------------------------- checking


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], *, eps: float = 1e-5,
              directions: int = 1, coords: int = 3,
              rng: np.random.Generator | None = None) -> dict[int, float]:
    """Compare autodiff against central differences for each tensor in ``params``.

    Each tensor is probed along ``directions`` random full-tensor directions
    and ``coords`` random single entries.  ``fn`` must be deterministic.
    Returns the worst relative error ``|a - n| / max(|a|, |n|)`` per tensor
    index.  Piecewise-linear activations can make single-entry probes noisy
    when a unit sits within ``eps`` of its kink; full-tensor directions
    average that out.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    fn().backward()
    analytic = [p.grad.copy() for p in params]

    def probe(p: Tensor, direction: np.ndarray) -> float:
        saved = p.data
        with no_grad():
            p.data = saved + eps * direction
            up = fn().item()
            p.data = saved - eps * direction
            down = fn().item()
        p.data = saved
        return (up - down) / (2 * eps)

    worst: dict[int, float] = {}
    for idx, (p, ga) in enumerate(zip(params, analytic)):
        dirs = [rng.standard_normal(p.shape) for _ in range(directions)]
        for flat_i in rng.choice(p.data.size, size=min(coords, p.data.size), replace=False):
            d = np.zeros(p.data.size)
            d[flat_i] = 1.0
            dirs.append(d.reshape(p.shape))
        err = 0.0
        for d in dirs:
            a = float((ga * d).sum())
            n = probe(p, d)
            scale = max(abs(a), abs(n))
            if scale < 1e-12:
                continue
            err = max(err, abs(a - n) / scale)
        worst[idx] = err
    for p in params:
        p.zero_grad()
    return worst
