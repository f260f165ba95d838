"""Command-line entry point: train, embed, restore, verify, eval, make-corpus."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import format_run_config, load_run_config
from .data import DataError, ImageFile, load_image, load_manifest_samples, png_read, png_write, write_hiding_corpus
from .metrics import psnr, ssim
from .pipeline import ConfigError, EmbeddingImage, ImageStack, embed, restore
from .training import DivergenceError, EvalResult, evaluate_sample, train

EXIT_OK = 0
EXIT_PROPERTY = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

log = logging.getLogger("iicnet")

REPORT_COLUMNS = ["sample_id"] + [f.name for f in dataclasses.fields(EvalResult)]


class UsageError(Exception):
    pass


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _load_ckpt(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    try:
        return checkpoint_load(path)
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    spec = rc.spec
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    if args.no_relation:
        spec = dataclasses.replace(spec, disable_relation=True)
    if args.no_freq_loss:
        spec = dataclasses.replace(spec, disable_freq_loss=True)
    spec = spec.effective()
    rc = dataclasses.replace(rc, spec=spec)
    if rc.manifest is None:
        raise ConfigError("[data] manifest is required for training")

    try:
        samples = [s for _, s in load_manifest_samples(rc.manifest)]
        for s in samples:
            _check_crop(s, spec)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not samples:
        raise DataError(f"manifest {rc.manifest} lists no samples")
    evals = []
    if rc.eval_manifest is not None:
        try:
            evals = load_manifest_samples(rc.eval_manifest)
        except ValueError as exc:
            raise DataError(str(exc)) from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.ini").write_text(format_run_config(rc))
    meta = {"seed": spec.seed, "iterations": spec.iterations}

    def save(path, store):
        checkpoint_save(store, path, spec.config, meta=meta)

    with open(out / "metrics.csv", "w", newline="") as fh:
        def on_record(rec):
            fh.write(rec.line() + "\n")
            if rec.iteration % 100 == 0:
                fh.flush()
                log.info(rec.line())

        try:
            net, store, _ = train(
                spec, samples, on_record=on_record, checkpoint_every=rc.checkpoint_every,
                on_checkpoint=lambda it, _net, st: save(out / f"checkpoint_{it:06d}.iicn", st),
            )
        except DivergenceError as exc:
            print(f"diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    save(out / "checkpoint.iicn", store)
    print(f"trained {spec.iterations} iterations; checkpoint {out / 'checkpoint.iicn'}")
    if evals:
        rows = [(sid, evaluate_sample(net, s)) for sid, s in evals]
        _write_report(out / "eval.csv", rows)
        mean = _mean_row(rows)
        print(f"held-out: emb_psnr {mean.emb_psnr:.3f} res_psnr {mean.res_psnr:.3f} "
              f"res_psnr_min {mean.res_psnr_min:.3f}")
    return EXIT_OK


def _check_crop(sample: ImageStack, spec) -> None:
    cfg = spec.config
    if sample.k != cfg.k:
        raise ValueError(f"sample has {sample.k} images, config expects k={cfg.k}")
    c, h, w = sample.images[0].shape
    if c != cfg.channels or h < cfg.height or w < cfg.width:
        raise ValueError(f"sample images {sample.images[0].shape} cannot be cropped to {cfg.image_shape}")


# ---------------------------------------------------------------- embed / restore


def cmd_embed(args) -> int:
    ck = _load_ckpt(args.ckpt)
    cfg = ck.config
    if len(args.inputs) != cfg.k:
        raise UsageError(f"got {len(args.inputs)} inputs, checkpoint expects k={cfg.k}")
    if cfg.embed_channels not in (1, 3):
        raise UsageError(f"{cfg.embed_channels}-channel embeddings cannot be stored as PNG")
    images = [load_image(p) for p in args.inputs]
    for p, im in zip(args.inputs, images):
        if im.shape != cfg.image_shape:
            raise UsageError(f"{p}: shape {im.shape} does not match config {cfg.image_shape}")
    stack_ = ImageStack(images, reference=cfg.reference)
    res = embed(stack_, ck.net, "test")
    levels = res.quantized.to_uint8()
    png_write(ImageFile(cfg.embed_width, cfg.embed_height, cfg.embed_channels, levels.transpose(1, 2, 0)), args.out)
    ref = stack_.reference_image(cfg)
    print(f"embedding PSNR vs reference: {psnr(res.quantized.values, ref):.3f} dB")
    return EXIT_OK


def cmd_restore(args) -> int:
    ck = _load_ckpt(args.ckpt)
    cfg = ck.config
    f = png_read(args.embedding)
    if (f.channels, f.height, f.width) != cfg.embed_shape:
        raise UsageError(f"embedding is {(f.channels, f.height, f.width)}, config expects {cfg.embed_shape}")
    restored = restore(EmbeddingImage.from_uint8(f.samples.transpose(2, 0, 1)), ck.net)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(restored, 1):
        png_write(ImageFile.from_array(img), out / f"restored_{i:02d}.png")
    if args.ref:
        if len(args.ref) != cfg.k:
            raise UsageError(f"got {len(args.ref)} reference images, expected {cfg.k}")
        print("image,psnr,ssim")
        for i, (img, path) in enumerate(zip(restored, args.ref), 1):
            orig = load_image(path)
            if orig.shape != img.shape:
                raise UsageError(f"{path}: shape {orig.shape} does not match {img.shape}")
            try:
                score = ssim(img, orig)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
            print(f"{i},{psnr(img, orig):.3f},{score:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- verify / eval


def cmd_verify(args) -> int:
    from .verify import check_gradients, check_invertibility

    if args.mode == "invertibility":
        rep = check_invertibility(args.seed, fault=args.inject_fault)
        for label, err in rep.detail.items():
            print(f"{label}: max roundtrip error {err:.3e}")
        print(f"max roundtrip error {rep.value:.3e} (tolerance {rep.tolerance:g})")
    else:
        rep = check_gradients(args.seed)
        print(f"max gradient relative error {rep.value:.3e} over {len(rep.detail)} tensors "
              f"(tolerance {rep.tolerance:g})")
    print("PASS" if rep.ok else "FAIL")
    return EXIT_OK if rep.ok else EXIT_PROPERTY


def _mean_row(rows) -> EvalResult:
    return EvalResult(*(float(np.mean([getattr(r, f.name) for _, r in rows]))
                        for f in dataclasses.fields(EvalResult)))


def _write_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for sid, r in rows:
            w.writerow([sid, *(repr(getattr(r, f.name)) for f in dataclasses.fields(EvalResult))])
        if rows:
            m = _mean_row(rows)
            w.writerow(["mean", *(repr(getattr(m, f.name)) for f in dataclasses.fields(EvalResult))])


def cmd_eval(args) -> int:
    ck = _load_ckpt(args.ckpt)
    try:
        samples = load_manifest_samples(args.manifest)
        rows = []
        for sid, s in samples:
            s.validate(ck.config)
            rows.append((sid, evaluate_sample(ck.net, s)))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    _write_report(args.report, rows)
    print(f"evaluated {len(rows)} samples -> {args.report}")
    return EXIT_OK


def cmd_make_corpus(args) -> int:
    manifest = write_hiding_corpus(args.out, args.count, args.k, args.size, args.seed, args.channels)
    print(manifest)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iicnet", description="Embed several images into one and restore them.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None, help="overrides [train] seed")
    t.add_argument("--no-relation", action="store_true", help="bypass the relation module")
    t.add_argument("--no-freq-loss", action="store_true", help="drop the frequency loss term")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="embed K images into one PNG")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--inputs", nargs="+", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    r = sub.add_parser("restore", help="restore K images from an embedding PNG")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--embedding", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--ref", nargs="+", help="original images, for a per-image PSNR/SSIM table")
    r.set_defaults(func=cmd_restore)

    v = sub.add_parser("verify", help="run the invertibility or gradient property suite")
    v.add_argument("--mode", choices=("invertibility", "gradcheck"), required=True)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    ev = sub.add_parser("eval", help="score a checkpoint on a manifest")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--report", required=True)
    ev.set_defaults(func=cmd_eval)

    mc = sub.add_parser("make-corpus", help="write a synthetic hiding corpus and its manifest")
    mc.add_argument("--out", required=True)
    mc.add_argument("--count", type=int, default=64)
    mc.add_argument("--k", type=int, default=2)
    mc.add_argument("--size", type=int, default=32)
    mc.add_argument("--channels", type=int, default=3)
    mc.add_argument("--seed", type=int, default=0)
    mc.set_defaults(func=cmd_make_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, str(exc))


if __name__ == "__main__":
    sys.exit(main())
