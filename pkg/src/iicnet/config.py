"""INI-style run configuration with sections [network], [train], [data] and [loss]."""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

from .layers import DenseSpec
from .pipeline import ConfigError, NetworkConfig
from .training import LossWeights, TrainRunSpec


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_int(v: str) -> int | None:
    return None if v.strip().lower() in ("", "none", "auto") else int(v)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(x) for x in v.replace(",", " ").split())


# key -> (parser, target) where target names a NetworkConfig / DenseSpec field
NETWORK_KEYS = {
    "k": (int, "k"),
    "channels": (int, "channels"),
    "height": (int, "height"),
    "width": (int, "width"),
    "downscale": (_bool, "downscale"),
    "downscale_kind": (str, "downscale_kind"),
    "embed_channels": (_opt_int, "embed_channels"),
    "blocks": (int, "blocks"),
    "relation": (_bool, "relation"),
    "relation_features": (int, "relation_features"),
    "split": (_opt_int, "split"),
    "reference": (int, "reference"),
    "dense_layers": (int, "dense.layers"),
    "dense_growth": (int, "dense.growth"),
    "dense_kernel": (int, "dense.kernel"),
    "leaky_slope": (float, "dense.slope"),
    "init_scale": (float, "dense.init_scale"),
}
TRAIN_KEYS = {
    "iterations": int,
    "batch_size": int,
    "lr": float,
    "lr_milestones": _floats,
    "lr_gamma": float,
    "beta1": float,
    "beta2": float,
    "eps": float,
    "seed": int,
    "flip": _bool,
    "disable_relation": _bool,
    "disable_freq_loss": _bool,
    "divergence_ratio": float,
    "checkpoint_every": int,
}
LOSS_KEYS = {"embedding": float, "frequency": float, "restoration": float}
DATA_KEYS = {"manifest": str, "eval_manifest": str}
SECTIONS = {"network": NETWORK_KEYS, "train": TRAIN_KEYS, "loss": LOSS_KEYS, "data": DATA_KEYS}


@dataclass
class RunConfig:
    spec: TrainRunSpec
    manifest: Path | None = None
    eval_manifest: Path | None = None
    checkpoint_every: int = 0


def _parse_section(parser: configparser.ConfigParser, name: str) -> dict:
    keys = SECTIONS[name]
    out = {}
    if not parser.has_section(name):
        return out
    for key, raw in parser.items(name):
        if key not in keys:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        conv = keys[key][0] if isinstance(keys[key], tuple) else keys[key]
        try:
            out[key] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from exc
    return out


def parse_run_config(text: str, base_dir: str | os.PathLike = ".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")

    net_vals = _parse_section(parser, "network")
    if "k" not in net_vals:
        raise ConfigError("[network] k is required")
    top, dense = {}, {}
    for key, value in net_vals.items():
        target = NETWORK_KEYS[key][1]
        if target.startswith("dense."):
            dense[target[6:]] = value
        else:
            top[target] = value
    try:
        cfg = NetworkConfig(dense=DenseSpec(**dense), **top)
        weights = LossWeights(**_parse_section(parser, "loss"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    train_vals = _parse_section(parser, "train")
    checkpoint_every = train_vals.pop("checkpoint_every", 0)
    if train_vals.get("iterations", 0) < 0 or train_vals.get("batch_size", 1) < 1:
        raise ConfigError("[train] iterations must be >= 0 and batch_size >= 1")
    if train_vals.get("lr", 1.0) <= 0:
        raise ConfigError("[train] lr must be positive")
    spec = TrainRunSpec(cfg, weights, **train_vals)

    data = _parse_section(parser, "data")
    base = Path(base_dir)
    manifest = base / data["manifest"] if "manifest" in data else None
    eval_manifest = base / data["eval_manifest"] if "eval_manifest" in data else None
    return RunConfig(spec, manifest, eval_manifest, checkpoint_every)


def load_run_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_run_config(text, path.parent)


def format_run_config(rc: RunConfig) -> str:
    """Render a (possibly ablated) run config back to INI text, manifest paths made absolute."""
    spec = rc.spec
    cfg = spec.config
    lines = ["[network]"]
    for key, (_, target) in NETWORK_KEYS.items():
        obj = cfg.dense if target.startswith("dense.") else cfg
        value = getattr(obj, target.split(".")[-1])
        lines.append(f"{key} = {'none' if value is None else _fmt(value)}")
    lines += ["", "[train]"]
    for key in TRAIN_KEYS:
        if key == "checkpoint_every":
            lines.append(f"checkpoint_every = {rc.checkpoint_every}")
        else:
            lines.append(f"{key} = {_fmt(getattr(spec, key))}")
    lines += ["", "[loss]"]
    for f in dataclasses.fields(spec.weights):
        lines.append(f"{f.name} = {_fmt(getattr(spec.weights, f.name))}")
    lines += ["", "[data]"]
    if rc.manifest is not None:
        lines.append(f"manifest = {Path(rc.manifest).resolve()}")
    if rc.eval_manifest is not None:
        lines.append(f"eval_manifest = {Path(rc.eval_manifest).resolve()}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)
