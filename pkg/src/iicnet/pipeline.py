"""The full conversion network: images -> embedding image -> restored images.

Forward chain::

    stack -> relation (fwd branch) -> downscale -> coupling stack
          -> channel squeeze (mean) -> quantize

Inverse chain::

    copy embedding K_e times -> coupling stack inverse -> downscale inverse
          -> relation (inv branch) -> unstack -> clamp to [0, 1]
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .imageops import resize_bilinear
from .layers import CouplingBlock, DenseSpec, Downscale, RelationModule, inn_forward, inn_inverse
from .tensor import (
    DTYPE,
    Tensor,
    chunk_channels,
    clamp,
    concat_channels,
    no_grad,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters plus the derived embedding geometry."""

    k: int
    channels: int = 3
    height: int = 32
    width: int = 32
    downscale: bool = False
    downscale_kind: str = "haar"
    embed_channels: int | None = None
    blocks: int = 8
    dense: DenseSpec = field(default_factory=DenseSpec)
    relation: bool = True
    relation_features: int = 8
    split: int | None = None
    reference: int = 0

    def __post_init__(self):
        if self.k < 1 or self.channels < 1:
            raise ConfigError("k and channels must be positive")
        if self.height < 1 or self.width < 1:
            raise ConfigError("height and width must be positive")
        if self.downscale_kind not in ("haar", "shuffle"):
            raise ConfigError(f"downscale_kind must be 'haar' or 'shuffle', got {self.downscale_kind!r}")
        if self.downscale and (self.height % 2 or self.width % 2):
            raise ConfigError("downscaling needs even height and width")
        if self.blocks < 0:
            raise ConfigError("blocks must be >= 0")
        if self.embed_channels is None:
            object.__setattr__(self, "embed_channels", self.channels)
        if self.embed_channels < 1:
            raise ConfigError("embed_channels must be positive")
        if self.m % self.embed_channels:
            raise ConfigError(
                f"M = {self.m} channels cannot be squeezed into C_e = {self.embed_channels} (M mod C_e != 0)")
        if self.dense.kernel % 2 == 0 or self.dense.layers < 0 or self.dense.growth < 1:
            raise ConfigError(f"invalid dense block spec {self.dense}")
        if self.blocks and not 0 < self.split_position < self.m:
            raise ConfigError(f"coupling split {self.split_position} outside (0, {self.m})")
        if not 0 <= self.reference < self.k:
            raise ConfigError(f"reference index {self.reference} outside [0, {self.k})")

    @property
    def n(self) -> int:
        return self.channels * self.k

    @property
    def m(self) -> int:
        return 4 * self.n if self.downscale else self.n

    @property
    def embed_height(self) -> int:
        return self.height // 2 if self.downscale else self.height

    @property
    def embed_width(self) -> int:
        return self.width // 2 if self.downscale else self.width

    @property
    def k_e(self) -> int:
        return self.m // self.embed_channels

    @property
    def split_position(self) -> int:
        if self.split is not None:
            return self.split
        if self.embed_channels < self.m:
            return self.embed_channels
        return self.m // 2

    @property
    def embed_shape(self) -> tuple[int, int, int]:
        return (self.embed_channels, self.embed_height, self.embed_width)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dense"] = dataclasses.asdict(self.dense)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["dense"] = DenseSpec(**d.get("dense", {}))
        return cls(**d)


@dataclass
class ImageStack:
    """``K`` images of shape ``(C, H, W)`` in ``[0, 1]`` and the index of the reference image."""

    images: list[np.ndarray]
    reference: int = 0

    def __post_init__(self):
        if not self.images:
            raise ValueError("an image stack needs at least one image")
        self.images = [np.asarray(im, dtype=DTYPE) for im in self.images]
        shape = self.images[0].shape
        if len(shape) != 3:
            raise ValueError(f"images must be (C, H, W), got {shape}")
        for im in self.images:
            if im.shape != shape:
                raise ValueError(f"image shapes differ: {shape} vs {im.shape}")
            if im.min() < 0.0 or im.max() > 1.0:
                raise ValueError("pixel values must lie in [0, 1]")
        if not 0 <= self.reference < len(self.images):
            raise ValueError(f"reference index {self.reference} out of range")

    @property
    def k(self) -> int:
        return len(self.images)

    def validate(self, cfg: NetworkConfig) -> None:
        if self.k != cfg.k:
            raise ConfigError(f"expected {cfg.k} images, got {self.k}")
        if self.images[0].shape != cfg.image_shape:
            raise ConfigError(f"expected images of shape {cfg.image_shape}, got {self.images[0].shape}")

    def tensor(self) -> Tensor:
        return stack(self.images)

    def reference_image(self, cfg: NetworkConfig) -> np.ndarray:
        return reference_target(self.images[self.reference], cfg)


@dataclass
class EmbeddingImage:
    values: np.ndarray
    quantized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=DTYPE)
        if self.quantized:
            levels = self.values * 255.0
            if (self.values.min() < 0 or self.values.max() > 1
                    or np.abs(levels - np.round(levels)).max() > 1e-9):
                raise ValueError("a quantized embedding must hold multiples of 1/255 in [0, 1]")

    @property
    def shape(self):
        return self.values.shape

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.round(self.values * 255.0), 0, 255).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "EmbeddingImage":
        return cls(np.asarray(arr, dtype=DTYPE) / 255.0, quantized=True)


@dataclass
class EmbedResult:
    quantized: EmbeddingImage
    raw: EmbeddingImage
    v: Tensor


def reference_target(image: np.ndarray, cfg: NetworkConfig) -> np.ndarray:
    """Reference image at embedding resolution (bilinear downsampling when needed)."""
    img = np.asarray(image, dtype=DTYPE)
    if img.shape[-3] != cfg.embed_channels:
        raise ConfigError(
            f"reference has {img.shape[-3]} channels but the embedding has {cfg.embed_channels}")
    if cfg.downscale:
        img = resize_bilinear(img, cfg.embed_height, cfg.embed_width)
    return img


# ---------------------------------------------------------------- stacking


def stack(images: Sequence[np.ndarray | Tensor]) -> Tensor:
    if not images:
        raise ValueError("stack needs at least one image")
    arrs = [im.data if isinstance(im, Tensor) else np.asarray(im, dtype=DTYPE) for im in images]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError(f"image shapes differ: {[a.shape for a in arrs]}")
    return Tensor(np.concatenate(arrs, axis=-3))


def unstack(x: Tensor | np.ndarray, k: int) -> list[np.ndarray]:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    n = data.shape[-3]
    if n % k:
        raise ValueError(f"{n} channels do not split into {k} images")
    c = n // k
    return [data[..., i * c:(i + 1) * c, :, :].copy() for i in range(k)]


# ---------------------------------------------------------------- squeeze & quantize


def channel_squeeze_forward(v: Tensor, embed_channels: int) -> Tensor:
    """Average the ``M / C_e`` preliminary embeddings held in ``v``."""
    m = v.shape[-3]
    if m % embed_channels:
        raise ConfigError(f"{m} channels are not a multiple of C_e = {embed_channels}")
    parts = chunk_channels(v, m // embed_channels)
    if len(parts) == 1:
        return parts[0]
    # mean written as offsets from the first group, so identical groups come back bit-exact
    first = parts[0]
    acc = parts[1] - first
    for p in parts[2:]:
        acc = acc + (p - first)
    return first + acc * (1.0 / len(parts))


def channel_squeeze_backward(e: Tensor, k_e: int) -> Tensor:
    """Concatenate ``k_e`` copies of the embedding along channels."""
    if k_e < 1:
        raise ValueError("k_e must be positive")
    return e if k_e == 1 else concat_channels([e] * k_e)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(e: Tensor, mode: str = "test", rng: np.random.Generator | None = None) -> Tensor:
    """8-bit storage model.

    ``train``: add uniform noise in ``[-0.5/255, 0.5/255]`` and clamp to
    ``[0, 1]`` (differentiable).  ``test``: round to the nearest level
    (half away from zero), clamp to ``[0, 255]`` and rescale; the result is
    detached.  ``none`` passes ``e`` through.
    """
    if mode == "none":
        return e
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs an rng")
        noise = rng.uniform(-0.5 / 255.0, 0.5 / 255.0, size=e.shape)
        return clamp(e + Tensor(noise), 0.0, 1.0)
    if mode == "test":
        levels = np.clip(round_half_away(e.data * 255.0), 0.0, 255.0)
        # e * 255 can round onto a half level that e itself is not on; step to the nearer level
        d = levels / 255.0 - np.clip(e.data, 0.0, 1.0)
        half = 0.5 / 255.0
        levels = levels - (d > half) + (d < -half)
        return Tensor(levels / 255.0)
    raise ValueError(f"unknown quantization mode {mode!r}")


# ---------------------------------------------------------------- network


class IICNet:
    """Parameters and forward/inverse passes for one :class:`NetworkConfig`."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.relation = (RelationModule(c.k, c.channels, c.relation_features, c.dense, rng)
                         if c.relation else None)
        self.down = Downscale(c.downscale_kind, c.n, rng) if c.downscale else None
        self.blocks = [CouplingBlock(c.m, c.split_position, c.dense, rng) for _ in range(c.blocks)]

    # parameters ------------------------------------------------------------
    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        if self.relation is not None:
            yield from self.relation.named_parameters("relation")
        if self.down is not None:
            yield from self.down.named_parameters("down")
        for i, cb in enumerate(self.blocks):
            yield from cb.named_parameters(f"inn.{i}")

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        if self.down is not None:
            yield "down.mix.perm", self.down.mix.perm

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name == "down.mix.perm" and self.down is not None:
            self.down.mix.perm = np.asarray(value, dtype=DTYPE)
        else:
            raise KeyError(name)

    def project(self) -> None:
        if self.down is not None:
            self.down.mix.project()

    # core ------------------------------------------------------------------
    def core_forward(self, r: Tensor) -> Tensor:
        u = self.down.forward(r) if self.down is not None else r
        return inn_forward(u, self.blocks)

    def core_inverse(self, v: Tensor) -> Tensor:
        u = inn_inverse(v, self.blocks)
        return self.down.inverse(u) if self.down is not None else u

    def encode(self, x: Tensor, mode: str = "test", rng: np.random.Generator | None = None
               ) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(quantized, raw, v)`` for a stacked input ``(..., N, H, W)``."""
        c = self.config
        if x.shape[-3:] != (c.n, c.height, c.width):
            raise ConfigError(f"input {x.shape[-3:]} does not match config {(c.n, c.height, c.width)}")
        r = self.relation.forward_branch(x) if self.relation is not None else x
        v = self.core_forward(r)
        raw = channel_squeeze_forward(v, c.embed_channels)
        return quantize(raw, mode, rng), raw, v

    def decode(self, e: Tensor, clamp_output: bool = True) -> Tensor:
        """Restore the stacked images ``(..., N, H, W)`` from an embedding."""
        c = self.config
        if e.shape[-3:] != c.embed_shape:
            raise ConfigError(f"embedding {e.shape[-3:]} does not match config {c.embed_shape}")
        v = channel_squeeze_backward(e, c.k_e)
        x_hat = self.core_inverse(v)
        if self.relation is not None:
            x_hat = self.relation.inverse_branch(x_hat)
        return clamp(x_hat, 0.0, 1.0) if clamp_output else x_hat


def embed(images: ImageStack, net: IICNet, mode: str = "test",
          rng: np.random.Generator | None = None) -> EmbedResult:
    images.validate(net.config)
    with no_grad():
        q, raw, v = net.encode(images.tensor(), mode, rng)
    return EmbedResult(
        EmbeddingImage(q.data, quantized=(mode == "test")),
        EmbeddingImage(raw.data),
        v,
    )


def restore(embedding: EmbeddingImage | np.ndarray, net: IICNet) -> list[np.ndarray]:
    values = embedding.values if isinstance(embedding, EmbeddingImage) else np.asarray(embedding)
    with no_grad():
        x_hat = net.decode(Tensor(values))
    return unstack(x_hat, net.config.k)


def roundtrip_core_check(x: Tensor | np.ndarray, net: IICNet) -> float:
    """Max abs error of ``core_inverse(core_forward(x))`` (downscale + couplings only)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    with no_grad():
        back = net.core_inverse(net.core_forward(x))
    return float(np.abs(back.data - x.data).max())
