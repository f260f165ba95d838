"""Losses, optimizer and the training loop."""
from __future__ import annotations

import dataclasses
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .metrics import psnr
from .pipeline import IICNet, ImageStack, NetworkConfig, reference_target, stack
from .tensor import (
    NonFiniteError,
    Tensor,
    absolute,
    chunk_channels,
    dft2_onesided,
    mean,
    square,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class MissingGradientError(RuntimeError):
    pass


# ---------------------------------------------------------------- losses


def _pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def loss_embedding(e_raw, e_ref) -> Tensor:
    """Mean squared error between embedding and reference."""
    e_raw, e_ref = _t(e_raw), _t(e_ref)
    _pair(e_raw, e_ref, "loss_embedding")
    return mean(square(e_ref - e_raw))


def loss_frequency(e_raw, e_ref) -> Tensor:
    """Mean squared magnitude of the one-sided spectrum difference."""
    e_raw, e_ref = _t(e_raw), _t(e_ref)
    _pair(e_raw, e_ref, "loss_frequency")
    spec = dft2_onesided(e_ref - e_raw)
    return mean(square(spec.real)) + mean(square(spec.imag))


def loss_restoration(restored: Sequence, originals: Sequence) -> Tensor:
    """Average over images of the per-pixel mean absolute error; pairing is positional."""
    if len(restored) != len(originals) or not restored:
        raise ValueError(f"loss_restoration: {len(restored)} restored vs {len(originals)} originals")
    acc = None
    for r, o in zip(restored, originals):
        r, o = _t(r), _t(o)
        _pair(r, o, "loss_restoration")
        term = mean(absolute(o - r))
        acc = term if acc is None else acc + term
    return acc * (1.0 / len(restored))


@dataclass(frozen=True)
class LossWeights:
    embedding: float = 1.0
    frequency: float = 1.0
    restoration: float = 16.0

    def __post_init__(self):
        ws = (self.embedding, self.frequency, self.restoration)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError(f"loss weights must be >= 0 with at least one > 0, got {ws}")


@dataclass
class LossParts:
    embedding: Tensor
    frequency: Tensor
    restoration: Tensor


def loss_total(parts: LossParts, w: LossWeights) -> Tensor:
    total = parts.embedding * w.embedding
    total = total + parts.frequency * w.frequency
    return total + parts.restoration * w.restoration


def compute_losses(net: IICNet, x: Tensor, ref: Tensor, rng: np.random.Generator,
                   weights: LossWeights) -> tuple[Tensor, LossParts]:
    """Forward with train-mode quantization, restore from the noisy embedding, score both ends."""
    k = net.config.k
    q, raw, _ = net.encode(x, "train", rng)
    # unclamped output: a clamp here would zero the gradient of saturated pixels
    x_hat = net.decode(q, clamp_output=False)
    parts = LossParts(
        loss_embedding(raw, ref),
        loss_frequency(raw, ref),
        loss_restoration(chunk_channels(x_hat, k), chunk_channels(x, k)),
    )
    return loss_total(parts, weights), parts


# ---------------------------------------------------------------- parameters & optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


class ParameterStore:
    """Ordered name -> trainable tensor map with per-tensor optimizer moments."""

    def __init__(self, named: Iterable[tuple[str, Tensor]], buffers: Iterable[tuple[str, np.ndarray]] = ()):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in named:
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.params[name] = t
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict(buffers)
        self.state: OrderedDict[str, AdamState] = OrderedDict(
            (n, AdamState(np.zeros_like(t.data), np.zeros_like(t.data))) for n, t in self.params.items())
        self.step = 0

    @classmethod
    def from_network(cls, net: IICNet) -> "ParameterStore":
        return cls(net.named_parameters(), net.named_buffers())

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def adam_step(store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter, then clear gradients."""
    for name, t in store:
        if t.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    store.step += 1
    c1 = 1.0 - beta1 ** store.step
    c2 = 1.0 - beta2 ** store.step
    for name, t in store:
        st = store.state[name]
        g = t.grad
        st.m *= beta1
        st.m += (1.0 - beta1) * g
        st.v *= beta2
        st.v += (1.0 - beta2) * g * g
        t.data = t.data - lr * (st.m / c1) / (np.sqrt(st.v / c2) + eps)
        t.grad = np.zeros_like(t.data)


def learning_rate(base: float, iteration: int, total: int, milestones=(0.5, 0.75), gamma: float = 0.5) -> float:
    """Step schedule: multiply by ``gamma`` at each milestone fraction of ``total``."""
    lr = base
    for frac in milestones:
        if iteration >= int(frac * total):
            lr *= gamma
    return lr


# ---------------------------------------------------------------- training loop


@dataclass
class TrainRunSpec:
    config: NetworkConfig
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 2000
    batch_size: int = 1
    lr: float = 1e-3
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_gamma: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    disable_relation: bool = False
    disable_freq_loss: bool = False
    flip: bool = False
    # a loss this many times above the first one counts as divergence
    divergence_ratio: float = 1e6

    def effective(self) -> "TrainRunSpec":
        """Apply the ablation switches to the network config and loss weights."""
        spec = self
        if self.disable_relation and self.config.relation:
            spec = dataclasses.replace(spec, config=self.config.replace(relation=False))
        if self.disable_freq_loss and self.weights.frequency != 0:
            spec = dataclasses.replace(spec, weights=dataclasses.replace(self.weights, frequency=0.0))
        return spec


@dataclass
class MetricRecord:
    iteration: int
    embedding: float
    frequency: float
    restoration: float
    total: float

    def line(self) -> str:
        return f"{self.iteration},{self.embedding!r},{self.frequency!r},{self.restoration!r},{self.total!r}"


def _crop_batch(dataset: Sequence[ImageStack], cfg: NetworkConfig, batch: int,
                rng: np.random.Generator, flip: bool) -> tuple[np.ndarray, np.ndarray]:
    xs, refs = [], []
    for idx in rng.integers(0, len(dataset), size=batch):
        sample = dataset[idx]
        _, h, w = sample.images[0].shape
        if h < cfg.height or w < cfg.width:
            raise ValueError(f"sample {idx} ({h}x{w}) is smaller than the {cfg.height}x{cfg.width} crop")
        top = int(rng.integers(0, h - cfg.height + 1))
        left = int(rng.integers(0, w - cfg.width + 1))
        imgs = [im[:, top:top + cfg.height, left:left + cfg.width] for im in sample.images]
        if flip and rng.random() < 0.5:
            imgs = [im[:, :, ::-1] for im in imgs]
        xs.append(stack(imgs).data)
        refs.append(reference_target(imgs[sample.reference], cfg))
    return np.stack(xs), np.stack(refs)


def train(spec: TrainRunSpec, dataset: Sequence[ImageStack], *,
          on_record: Callable[[MetricRecord], None] | None = None,
          on_checkpoint: Callable[[int, IICNet, ParameterStore], None] | None = None,
          checkpoint_every: int = 0,
          net: IICNet | None = None) -> tuple[IICNet, ParameterStore, list[MetricRecord]]:
    """Run ``spec.iterations`` Adam steps; returns the network, its store and the metric log.

    Randomness (initialization, sample order, crops, quantization noise) all
    flows from ``spec.seed``.
    """
    spec = spec.effective()
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    cfg = spec.config
    for s in dataset:
        if s.k != cfg.k:
            raise ValueError(f"dataset sample has {s.k} images, config expects {cfg.k}")
    if net is None:
        net = IICNet(cfg, seed=spec.seed)
    store = ParameterStore.from_network(net)
    rng = np.random.default_rng([spec.seed, 1])
    records: list[MetricRecord] = []

    for it in range(spec.iterations):
        x_np, ref_np = _crop_batch(dataset, cfg, spec.batch_size, rng, spec.flip)
        try:
            total, parts = compute_losses(net, Tensor(x_np), Tensor(ref_np), rng, spec.weights)
            if not np.isfinite(total.data):
                raise NonFiniteError("total loss")
            total.backward()
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite values at iteration {it}: {exc}") from exc
        rec = MetricRecord(it, parts.embedding.item(), parts.frequency.item(),
                           parts.restoration.item(), total.item())
        if records and rec.total > spec.divergence_ratio * max(records[0].total, 1e-12):
            raise DivergenceError(f"loss {rec.total:.3e} at iteration {it} exceeds "
                                  f"{spec.divergence_ratio:g} x the initial {records[0].total:.3e}")
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        lr = learning_rate(spec.lr, it, spec.iterations, spec.lr_milestones, spec.lr_gamma)
        with np.errstate(over="ignore", invalid="ignore"):
            adam_step(store, lr, spec.beta1, spec.beta2, spec.eps)
        if not all(np.isfinite(t.data).all() for _, t in store):
            raise DivergenceError(f"non-finite parameters after the update at iteration {it}")
        net.project()
        if checkpoint_every and on_checkpoint is not None and (it + 1) % checkpoint_every == 0:
            on_checkpoint(it + 1, net, store)
        if it % 100 == 0:
            log.info("iter %d total %.5f emb %.5f freq %.5f res %.5f", it, rec.total,
                     rec.embedding, rec.frequency, rec.restoration)
    return net, store, records


@dataclass
class EvalResult:
    emb_psnr: float
    emb_ssim: float
    res_psnr: float
    res_ssim: float
    # worst restored image, so a network that only restores the reference stands out
    res_psnr_min: float


def evaluate_sample(net: IICNet, sample: ImageStack) -> EvalResult:
    """Test-mode embed/restore of one stack; restored scores average over the K images."""
    from .metrics import ssim
    from .pipeline import embed, restore

    res = embed(sample, net, "test")
    ref = sample.reference_image(net.config)
    restored = restore(res.quantized, net)
    rp = [psnr(r, o) for r, o in zip(restored, sample.images)]
    rs = [ssim(r, o) for r, o in zip(restored, sample.images)]
    return EvalResult(psnr(res.quantized.values, ref), ssim(res.quantized.values, ref),
                      float(np.mean(rp)), float(np.mean(rs)), float(min(rp)))


def evaluate(net: IICNet, samples: Sequence[ImageStack]) -> EvalResult:
    rows = [evaluate_sample(net, s) for s in samples]
    return EvalResult(*(float(np.mean([getattr(r, f.name) for r in rows]))
                        for f in dataclasses.fields(EvalResult)))
