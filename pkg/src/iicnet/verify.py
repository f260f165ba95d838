"""On-demand property suites: core invertibility and gradient correctness."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import DenseSpec
from .pipeline import IICNet, NetworkConfig, reference_target, roundtrip_core_check, stack
from .tensor import Tensor, gradcheck
from .training import LossWeights, compute_losses

INVERTIBILITY_TOL = 1e-8
GRADIENT_TOL = 1e-4

# (downscale, kind, blocks) grid for the invertibility suite
CORE_GRID = [(False, "haar", b) for b in (1, 8, 32)] + [
    (True, kind, b) for kind in ("haar", "shuffle") for b in (1, 8, 32)
]


@dataclass
class CheckReport:
    value: float
    tolerance: float
    detail: dict

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.value)) and self.value <= self.tolerance


def perturb_parameters(net: IICNet, rng: np.random.Generator, scale: float = 0.03) -> None:
    """Add noise to every parameter so zero-initialized layers stop being trivial."""
    for _, p in net.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    net.project()


def _corrupt_inverse(net: IICNet) -> None:
    # negative control: the inverse pass uses a slightly different first block
    blk = net.blocks[0]
    original = blk.inverse

    def broken(x):
        out = original(x)
        return Tensor(out.data + 1e-3)

    blk.inverse = broken


def invertibility_case(seed: int, downscale: bool, kind: str, blocks: int, *,
                       k: int = 3, size: int = 16, fault: bool = False) -> float:
    cfg = NetworkConfig(k=k, channels=3, height=size, width=size, downscale=downscale,
                        downscale_kind=kind, blocks=blocks, relation=False,
                        dense=DenseSpec(layers=1, growth=4))
    rng = np.random.default_rng([seed, blocks, int(downscale), kind == "shuffle"])
    net = IICNet(cfg, seed=int(rng.integers(2**31)))
    perturb_parameters(net, rng)
    if fault:
        _corrupt_inverse(net)
    x = rng.uniform(0.0, 1.0, size=(cfg.n, size, size))
    return roundtrip_core_check(x, net)


def check_invertibility(seed: int, *, grid=CORE_GRID, fault: bool = False) -> CheckReport:
    detail = {}
    for downscale, kind, blocks in grid:
        label = f"{'down-' + kind if downscale else 'plain'}/{blocks}"
        detail[label] = invertibility_case(seed, downscale, kind, blocks, fault=fault)
    return CheckReport(max(detail.values()), INVERTIBILITY_TOL, detail)


def gradient_toy_network(seed: int) -> tuple[IICNet, np.ndarray, np.ndarray]:
    """2-block, K=2, 8x8 network with non-degenerate weights, plus an input stack and reference."""
    cfg = NetworkConfig(k=2, channels=3, height=8, width=8, blocks=2, relation=True,
                        relation_features=4, dense=DenseSpec(layers=2, growth=4))
    rng = np.random.default_rng([seed, 7])
    net = IICNet(cfg, seed=seed)
    perturb_parameters(net, rng, scale=0.05)
    images = [rng.uniform(0.25, 0.75, size=cfg.image_shape) for _ in range(cfg.k)]
    x = stack(images).data
    ref = reference_target(images[0], cfg)
    return net, x, ref


def check_gradients(seed: int, *, directions: int = 2, eps: float = 1e-7) -> CheckReport:
    """Directional central differences of the full training loss for every parameter tensor."""
    net, x, ref = gradient_toy_network(seed)
    names, params = zip(*net.named_parameters())
    weights = LossWeights(1.0, 1.0, 16.0)

    def loss():
        # same quantization noise on every call
        total, _ = compute_losses(net, Tensor(x), Tensor(ref), np.random.default_rng([seed, 3]), weights)
        return total

    worst = gradcheck(loss, params, eps=eps, directions=directions, coords=0,
                      rng=np.random.default_rng([seed, 11]))
    detail = {names[i]: err for i, err in worst.items()}
    return CheckReport(max(detail.values()), GRADIENT_TOL, detail)
