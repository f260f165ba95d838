"""Invertible and residual building blocks.

Parameters live in plain :class:`~iicnet.tensor.Tensor` objects owned by
each layer; ``named_parameters`` walks them in a fixed order so a network
can be flattened into a :class:`~iicnet.training.ParameterStore`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .tensor import (
    DTYPE,
    Tensor,
    centered_sigmoid,
    channel_mix,
    chunk_channels,
    concat_channels,
    conv2d,
    exp,
    leaky_relu,
    matmul,
    split_channels,
    triangular_inverse,
)

Params = Iterator[tuple[str, Tensor]]


@dataclass(frozen=True)
class DenseSpec:
    layers: int = 4
    growth: int = 8
    kernel: int = 3
    slope: float = 0.2
    init_scale: float = 0.1

    def __post_init__(self):
        if self.layers < 0 or self.growth < 1:
            raise ValueError(f"dense block needs layers >= 0 and growth >= 1, got {self.layers}, {self.growth}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")
        if self.slope < 0 or self.init_scale < 0:
            raise ValueError("slope and init_scale must be non-negative")


def _kaiming(rng: np.random.Generator, shape, slope: float, scale: float) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    std = np.sqrt(2.0 / ((1.0 + slope**2) * fan_in))
    return rng.standard_normal(shape) * std * scale


class DenseBlock:
    """Densely connected conv stack ending in a projection to ``out_ch`` channels.

    Layer ``i`` sees the concatenation of the block input and all earlier
    layer outputs.  With ``zero_init`` the final projection starts at zero,
    so the block initially outputs zeros.
    """

    def __init__(self, in_ch: int, out_ch: int, spec: DenseSpec, rng: np.random.Generator,
                 zero_init: bool = True):
        self.in_ch, self.out_ch, self.spec = in_ch, out_ch, spec
        k = spec.kernel
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        ch = in_ch
        for _ in range(spec.layers):
            shape = (spec.growth, ch, k, k)
            self.weights.append(Tensor(_kaiming(rng, shape, spec.slope, spec.init_scale), requires_grad=True))
            self.biases.append(Tensor(np.zeros(spec.growth), requires_grad=True))
            ch += spec.growth
        shape = (out_ch, ch, k, k)
        final = np.zeros(shape) if zero_init else _kaiming(rng, shape, spec.slope, spec.init_scale)
        self.weights.append(Tensor(final, requires_grad=True))
        self.biases.append(Tensor(np.zeros(out_ch), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.in_ch:
            raise ValueError(f"DenseBlock expects {self.in_ch} channels, got {x.shape[-3]}")
        feats = [x]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            inp = feats[0] if len(feats) == 1 else concat_channels(feats)
            feats.append(leaky_relu(conv2d(inp, w, b), self.spec.slope))
        inp = feats[0] if len(feats) == 1 else concat_channels(feats)
        return conv2d(inp, self.weights[-1], self.biases[-1])

    def final_layer(self) -> tuple[Tensor, Tensor]:
        return self.weights[-1], self.biases[-1]

    def named_parameters(self, prefix: str) -> Params:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.conv{i}.weight", w
            yield f"{prefix}.conv{i}.bias", b


# ---------------------------------------------------------------- coupling


class CouplingBlock:
    """Two complementary affine couplings split at channel ``split``.

    forward::

        top' = top + h2(bottom)
        bottom' = bottom * exp(sc(g(top'))) + h1(top')

    where ``sc`` is the centered sigmoid, so every scale factor lies in
    ``(1/e, e)``.
    """

    def __init__(self, channels: int, split: int, spec: DenseSpec, rng: np.random.Generator):
        if not 0 < split < channels:
            raise ValueError(f"split position {split} outside (0, {channels})")
        self.channels, self.split = channels, split
        top, bottom = split, channels - split
        self.h2 = DenseBlock(bottom, top, spec, rng)
        self.g = DenseBlock(top, bottom, spec, rng)
        self.h1 = DenseBlock(top, bottom, spec, rng)

    def _check(self, x: Tensor) -> None:
        if x.shape[-3] != self.channels:
            raise ValueError(f"coupling block expects {self.channels} channels, got {x.shape[-3]}")

    def scale(self, top_new: Tensor) -> Tensor:
        return exp(centered_sigmoid(self.g(top_new)))

    def forward(self, u: Tensor) -> Tensor:
        self._check(u)
        top, bottom = split_channels(u, self.split)
        top = top + self.h2(bottom)
        bottom = bottom * self.scale(top) + self.h1(top)
        return concat_channels([top, bottom])

    def inverse(self, y: Tensor) -> Tensor:
        self._check(y)
        top, bottom = split_channels(y, self.split)
        bottom = (bottom - self.h1(top)) * exp(-centered_sigmoid(self.g(top)))
        top = top - self.h2(bottom)
        return concat_channels([top, bottom])

    def named_parameters(self, prefix: str) -> Params:
        yield from self.h2.named_parameters(f"{prefix}.h2")
        yield from self.g.named_parameters(f"{prefix}.g")
        yield from self.h1.named_parameters(f"{prefix}.h1")


def coupling_forward(u: Tensor, cb: CouplingBlock) -> Tensor:
    return cb.forward(u)


def coupling_inverse(y: Tensor, cb: CouplingBlock) -> Tensor:
    return cb.inverse(y)


def inn_forward(u: Tensor, blocks: Sequence[CouplingBlock]) -> Tensor:
    for cb in blocks:
        u = cb.forward(u)
    return u


def inn_inverse(v: Tensor, blocks: Sequence[CouplingBlock]) -> Tensor:
    for cb in reversed(blocks):
        v = cb.inverse(v)
    return v


# ---------------------------------------------------------------- downscaling


def _check_even(x: Tensor, what: str) -> None:
    if x.ndim < 3:
        raise ValueError(f"{what} needs (..., C, H, W) input")
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"{what} needs even spatial dims, got {h}x{w}")


def _haar_fwd(x: np.ndarray) -> np.ndarray:
    p00 = x[..., 0::2, 0::2]
    p01 = x[..., 0::2, 1::2]
    p10 = x[..., 1::2, 0::2]
    p11 = x[..., 1::2, 1::2]
    a = (p00 + p01 + p10 + p11) * 0.5
    h = (p00 - p01 + p10 - p11) * 0.5
    v = (p00 + p01 - p10 - p11) * 0.5
    d = (p00 - p01 - p10 + p11) * 0.5
    return np.concatenate([a, h, v, d], axis=-3)


def _haar_inv(y: np.ndarray) -> np.ndarray:
    n = y.shape[-3] // 4
    a, h, v, d = (y[..., i * n:(i + 1) * n, :, :] for i in range(4))
    out = np.empty(y.shape[:-3] + (n, 2 * y.shape[-2], 2 * y.shape[-1]), dtype=DTYPE)
    out[..., 0::2, 0::2] = (a + h + v + d) * 0.5
    out[..., 0::2, 1::2] = (a - h + v - d) * 0.5
    out[..., 1::2, 0::2] = (a + h - v - d) * 0.5
    out[..., 1::2, 1::2] = (a - h - v + d) * 0.5
    return out


def haar_forward(x: Tensor) -> Tensor:
    """Orthonormal one-level Haar split, channels grouped ``[a | h | v | d]``.

    Per 2x2 block ``(p00, p01, p10, p11)``::

        a = (p00 + p01 + p10 + p11) / 2      h = (p00 - p01 + p10 - p11) / 2
        v = (p00 + p01 - p10 - p11) / 2      d = (p00 - p01 - p10 + p11) / 2
    """
    _check_even(x, "haar_forward")
    return Tensor._result(_haar_fwd(x.data), (x,), lambda g: (_haar_inv(g),), "haar")


def haar_inverse(y: Tensor) -> Tensor:
    if y.ndim < 3 or y.shape[-3] % 4:
        raise ValueError(f"haar_inverse needs a multiple of 4 channels, got {y.shape}")
    return Tensor._result(_haar_inv(y.data), (y,), lambda g: (_haar_fwd(g),), "haar_inv")


def _shuffle_down(x: np.ndarray) -> np.ndarray:
    *lead, n, h, w = x.shape
    r = x.reshape(*lead, n, h // 2, 2, w // 2, 2)
    nl = len(lead)
    r = r.transpose(*range(nl), nl, nl + 2, nl + 4, nl + 1, nl + 3)  # (..., n, 2, 2, h/2, w/2)
    return r.reshape(*lead, 4 * n, h // 2, w // 2)


def _shuffle_up(y: np.ndarray) -> np.ndarray:
    *lead, m, h, w = y.shape
    n = m // 4
    r = y.reshape(*lead, n, 2, 2, h, w)
    nl = len(lead)
    r = r.transpose(*range(nl), nl, nl + 3, nl + 1, nl + 4, nl + 2)  # (..., n, h, 2, w, 2)
    return r.reshape(*lead, n, 2 * h, 2 * w)


def pixel_shuffle_down(x: Tensor) -> Tensor:
    """Space-to-depth: output channel ``4c + 2i + j`` holds ``x[c, 2y + i, 2x + j]``."""
    _check_even(x, "pixel_shuffle_down")
    return Tensor._result(_shuffle_down(x.data), (x,), lambda g: (_shuffle_up(g),), "shuffle_down")


def pixel_shuffle_up(y: Tensor) -> Tensor:
    if y.ndim < 3 or y.shape[-3] % 4:
        raise ValueError(f"pixel_shuffle_up needs a multiple of 4 channels, got {y.shape}")
    return Tensor._result(_shuffle_up(y.data), (y,), lambda g: (_shuffle_down(g),), "shuffle_up")


# ---------------------------------------------------------------- 1x1 mixing


class Inv1x1:
    """Invertible channel mixing ``W = P L (U + diag(s))``.

    ``P`` is a fixed permutation, ``L`` unit lower triangular, ``U`` strictly
    upper triangular and ``s`` a diagonal kept at ``|s| >= floor``.
    """

    floor = 1e-4

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        import scipy.linalg

        self.channels = channels
        if rng is None:
            w0 = np.eye(channels)
        else:
            w0 = np.linalg.qr(rng.standard_normal((channels, channels)))[0]
        p, lo, up = scipy.linalg.lu(w0)
        self.perm = p
        self.lower = Tensor(np.tril(lo, -1), requires_grad=True)
        self.upper = Tensor(np.triu(up, 1), requires_grad=True)
        self.diag = Tensor(np.diag(up).copy(), requires_grad=True)
        self.project()

    @classmethod
    def from_matrix(cls, w: np.ndarray) -> "Inv1x1":
        import scipy.linalg

        m = cls(w.shape[0])
        p, lo, up = scipy.linalg.lu(np.asarray(w, dtype=DTYPE))
        if np.any(np.abs(np.diag(up)) < cls.floor):
            raise ValueError("matrix is singular or too close to singular")
        m.perm = p
        m.lower.data = np.tril(lo, -1)
        m.upper.data = np.triu(up, 1)
        m.diag.data = np.diag(up).copy()
        return m

    def project(self) -> None:
        """Restore the triangular structure and the diagonal floor after an update."""
        self.lower.data = np.tril(self.lower.data, -1)
        self.upper.data = np.triu(self.upper.data, 1)
        d = self.diag.data
        sign = np.where(d < 0, -1.0, 1.0)
        self.diag.data = sign * np.maximum(np.abs(d), self.floor)

    def _factors(self) -> tuple[Tensor, Tensor]:
        eye = Tensor(np.eye(self.channels))
        lo = self.lower + eye
        up = self.upper + _diag(self.diag)
        return lo, up

    def matrix(self) -> Tensor:
        lo, up = self._factors()
        return matmul(Tensor(self.perm), matmul(lo, up))

    def inverse_matrix(self) -> Tensor:
        lo, up = self._factors()
        lo_inv = triangular_inverse(lo, lower=True, unit_diagonal=True)
        up_inv = triangular_inverse(up, lower=False)
        return matmul(up_inv, matmul(lo_inv, Tensor(self.perm.T)))

    def forward(self, x: Tensor) -> Tensor:
        return channel_mix(self.matrix(), x)

    def inverse(self, y: Tensor) -> Tensor:
        return channel_mix(self.inverse_matrix(), y)

    def named_parameters(self, prefix: str) -> Params:
        yield f"{prefix}.lower", self.lower
        yield f"{prefix}.upper", self.upper
        yield f"{prefix}.diag", self.diag


def _diag(v: Tensor) -> Tensor:
    return Tensor._result(np.diag(v.data), (v,), lambda g: (np.diag(g).copy(),), "diag")


def inv1x1_forward(x: Tensor, m: Inv1x1) -> Tensor:
    return m.forward(x)


def inv1x1_inverse(y: Tensor, m: Inv1x1) -> Tensor:
    return m.inverse(y)


class Downscale:
    """Haar or pixel-shuffle space-to-depth followed by an invertible 1x1 mix."""

    def __init__(self, kind: str, channels_in: int, rng: np.random.Generator | None):
        if kind not in ("haar", "shuffle"):
            raise ValueError(f"unknown downscale kind {kind!r}")
        self.kind = kind
        self.mix = Inv1x1(4 * channels_in, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = haar_forward(x) if self.kind == "haar" else pixel_shuffle_down(x)
        return self.mix.forward(y)

    def inverse(self, u: Tensor) -> Tensor:
        y = self.mix.inverse(u)
        return haar_inverse(y) if self.kind == "haar" else pixel_shuffle_up(y)

    def named_parameters(self, prefix: str) -> Params:
        yield from self.mix.named_parameters(f"{prefix}.mix")


# ---------------------------------------------------------------- relation


class RelationBranch:
    """One set of ``K`` headers and ``K`` tailers with residual connections.

    Headers map each image (``C`` channels) to ``features`` channels; the
    concatenated features feed the tailers whose outputs are added back onto
    the corresponding input images.  Tailers end in zero-initialized
    projections, so a fresh branch is the identity.
    """

    def __init__(self, k: int, channels: int, features: int, spec: DenseSpec, rng: np.random.Generator):
        self.k, self.channels, self.features = k, channels, features
        self.headers = [DenseBlock(channels, features, spec, rng, zero_init=False) for _ in range(k)]
        self.tailers = [DenseBlock(k * features, channels, spec, rng) for _ in range(k)]

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[-3]
        if n % self.k or n // self.k != self.channels:
            raise ValueError(f"relation module expects {self.k} x {self.channels} channels, got {n}")
        images = chunk_channels(x, self.k)
        feats = [hd(img) for hd, img in zip(self.headers, images)]
        joint = feats[0] if self.k == 1 else concat_channels(feats)
        out = [tl(joint) + img for tl, img in zip(self.tailers, images)]
        return out[0] if self.k == 1 else concat_channels(out)

    def named_parameters(self, prefix: str) -> Params:
        for i, hd in enumerate(self.headers):
            yield from hd.named_parameters(f"{prefix}.header{i}")
        for i, tl in enumerate(self.tailers):
            yield from tl.named_parameters(f"{prefix}.tailer{i}")


class RelationModule:
    """Forward-side and inverse-side relation branches of identical shape, independent weights."""

    def __init__(self, k: int, channels: int, features: int, spec: DenseSpec, rng: np.random.Generator):
        self.forward_branch = RelationBranch(k, channels, features, spec, rng)
        self.inverse_branch = RelationBranch(k, channels, features, spec, rng)

    def named_parameters(self, prefix: str) -> Params:
        yield from self.forward_branch.named_parameters(f"{prefix}.fwd")
        yield from self.inverse_branch.named_parameters(f"{prefix}.inv")


def relation_forward(x: Tensor, rm: RelationModule) -> Tensor:
    return rm.forward_branch(x)


def relation_inverse(x_hat: Tensor, rm: RelationModule) -> Tensor:
    """Inverse-side branch; a learned approximation, not an exact inverse."""
    return rm.inverse_branch(x_hat)
