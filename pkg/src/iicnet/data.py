"""Image files, toy task generators and dataset manifests."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageops import resize_bilinear
from .pipeline import ImageStack

TASK_KINDS = ("sequence", "dual_view", "hiding")


class DataError(ValueError):
    pass


class UnsupportedDepthError(DataError):
    pass


# ---------------------------------------------------------------- PNG files


@dataclass
class ImageFile:
    """8-bit samples stored ``(height, width, channels)``."""

    width: int
    height: int
    channels: int
    samples: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise DataError(f"only gray or RGB images are supported, got {self.channels} channels")
        self.samples = np.asarray(self.samples, dtype=np.uint8).reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, img: np.ndarray) -> "ImageFile":
        """From a ``(C, H, W)`` array in ``[0, 1]``; values are rounded to the nearest level."""
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        levels = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
        c, h, w = levels.shape
        return cls(w, h, c, levels.transpose(1, 2, 0))

    def to_array(self) -> np.ndarray:
        """``(C, H, W)`` float64 array of ``level / 255``."""
        return self.samples.transpose(2, 0, 1).astype(np.float64) / 255.0


def png_read(path: str | os.PathLike) -> ImageFile:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise DataError(f"{path}: not a PNG file")
            info_depth = im.info.get("bitdepth")
            if im.mode in ("I;16", "I;16B", "I;16L", "I", "F") or info_depth == 16:
                raise UnsupportedDepthError(f"{path}: only 8-bit PNGs are supported (mode {im.mode})")
            if im.mode in ("RGBA", "LA", "P", "1", "L", "RGB"):
                if im.mode == "RGBA":
                    raise DataError(f"{path}: alpha channels are not supported")
                if im.mode in ("P", "1", "LA"):
                    im = im.convert("RGB" if im.mode == "P" else "L")
            else:
                raise UnsupportedDepthError(f"{path}: unsupported PNG mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"{path}: malformed PNG ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    return ImageFile(w, h, c, arr)


def png_write(image: ImageFile, path: str | os.PathLike) -> None:
    from PIL import Image

    arr = np.ascontiguousarray(image.samples)
    Image.fromarray(arr[:, :, 0] if image.channels == 1 else arr).save(path, format="PNG")


def load_image(path: str | os.PathLike) -> np.ndarray:
    return png_read(path).to_array()


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    png_write(ImageFile.from_array(img), path)


# ---------------------------------------------------------------- task samples


@dataclass
class TaskSample:
    stack: ImageStack
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DataError(f"unknown task kind {self.kind!r}")


def sequence_indices(k: int, step: int, start: int = 0) -> list[int]:
    return [start + i * step for i in range(k)]


def make_sequence_sample(frames: Sequence[np.ndarray], k: int, step: int = 1, start: int = 0) -> TaskSample:
    """``k`` frames at stride ``step``; the middle one is the reference."""
    if k < 1 or k % 2 == 0:
        raise DataError(f"sequence tasks need an odd frame count, got {k}")
    if step < 1:
        raise DataError("step must be >= 1")
    need = start + (k - 1) * step + 1
    if len(frames) < need:
        raise DataError(f"need {need} frames for k={k}, step={step}, got {len(frames)}")
    idx = sequence_indices(k, step, start)
    stack = ImageStack([frames[i] for i in idx], reference=k // 2)
    return TaskSample(stack, "sequence", {"indices": idx, "step": step})


def zoom_window(height: int, width: int, zoom: float) -> tuple[int, int, int, int]:
    """Rows ``[top, bottom)`` and cols ``[left, right)`` of the centered ``1/zoom`` crop."""
    ch, cw = int(round(height / zoom)), int(round(width / zoom))
    top, left = (height - ch) // 2, (width - cw) // 2
    return top, top + ch, left, left + cw


def make_dualview_sample(img: np.ndarray, zoom: float = 2) -> TaskSample:
    """Stack ``[normal view, zoomed view]``; the zoomed view is a centered crop upsampled back."""
    img = np.asarray(img, dtype=np.float64)
    if zoom < 1:
        raise DataError("zoom must be >= 1")
    _, h, w = img.shape
    top, bottom, left, right = zoom_window(h, w, zoom)
    if bottom - top < 1 or right - left < 1:
        raise DataError(f"{h}x{w} image too small for a x{zoom} zoom")
    zoomed = resize_bilinear(img[:, top:bottom, left:right], h, w)
    return TaskSample(ImageStack([img, np.clip(zoomed, 0.0, 1.0)], reference=0), "dual_view",
                      {"zoom": zoom, "window": (top, bottom, left, right)})


def make_hiding_sample(images: Sequence[np.ndarray]) -> TaskSample:
    """Unrelated images to hide; the first one is the cover/reference."""
    if len(images) < 2:
        raise DataError("hiding needs at least two images")
    shape = np.shape(images[0])
    if any(np.shape(im) != shape for im in images):
        raise DataError("hiding images must share a shape")
    return TaskSample(ImageStack(list(images), reference=0), "hiding", {"k": len(images)})


# ---------------------------------------------------------------- synthetic images


def synthetic_image(rng: np.random.Generator, size: int = 32, channels: int = 3) -> np.ndarray:
    """Smooth colour field with a few soft-edged shapes, values inside ``[0.05, 0.95]``."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((channels, size, size))
    for c in range(channels):
        a, b, base = rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.3, 0.7)
        field_ = base + a * (xx - 0.5) + b * (yy - 0.5)
        for _ in range(2):
            fx, fy = rng.uniform(0.5, 2.0, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            field_ += rng.uniform(0.02, 0.08) * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
        img[c] = field_
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        ry, rx = rng.uniform(0.1, 0.3, size=2)
        colour = rng.uniform(0.1, 0.9, size=channels)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        alpha = 1.0 / (1.0 + np.exp((d - 1.0) * 6.0))
        img = img * (1 - alpha) + colour[:, None, None] * alpha
    return np.clip(img, 0.05, 0.95)


def synthetic_corpus(count: int, size: int = 32, channels: int = 3, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size, channels) for _ in range(count)]


def hiding_samples(images: Sequence[np.ndarray], k: int) -> list[TaskSample]:
    """Group consecutive images into ``len(images) // k`` hiding stacks."""
    return [make_hiding_sample(images[i:i + k]) for i in range(0, len(images) - k + 1, k)]


# ---------------------------------------------------------------- manifests

# One sample per line:  <kind> <file> [<file> ...] [key=value ...]
# Paths are relative to the manifest's directory; '#' starts a comment.


@dataclass
class ManifestEntry:
    kind: str
    files: list[str]
    params: dict[str, str]
    sample_id: str


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind, rest = tokens[0], tokens[1:]
        if kind not in TASK_KINDS:
            raise DataError(f"{path}:{lineno}: unknown task kind {kind!r}")
        files = [t for t in rest if "=" not in t]
        params = dict(t.split("=", 1) for t in rest if "=" in t)
        if not files:
            raise DataError(f"{path}:{lineno}: no image files listed")
        entries.append(ManifestEntry(kind, files, params, params.get("id", f"sample{len(entries):04d}")))
    return entries


def write_manifest(path: str | os.PathLike, entries: Sequence[ManifestEntry]) -> None:
    lines = []
    for e in entries:
        params = dict(e.params)
        params.setdefault("id", e.sample_id)
        lines.append(" ".join([e.kind, *e.files, *(f"{k}={v}" for k, v in params.items())]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_manifest_samples(path: str | os.PathLike) -> list[tuple[str, ImageStack]]:
    """Read every manifest entry into an :class:`ImageStack` (``ref=`` overrides the task default)."""
    base = Path(path).parent
    out = []
    for e in read_manifest(path):
        images = [load_image(base / f) for f in e.files]
        if e.kind == "sequence":
            default_ref = len(images) // 2
        else:
            default_ref = 0
        try:
            ref = int(e.params.get("ref", default_ref))
            out.append((e.sample_id, ImageStack(images, reference=ref)))
        except ValueError as exc:
            raise DataError(f"manifest sample {e.sample_id}: {exc}") from exc
    return out


def write_hiding_corpus(directory: str | os.PathLike, count: int, k: int, size: int = 32,
                        seed: int = 0, channels: int = 3) -> Path:
    """Write ``count`` synthetic PNGs grouped into hiding samples of ``k``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = synthetic_corpus(count, size, channels, seed)
    names = []
    for i, img in enumerate(images):
        name = f"img_{i:04d}.png"
        save_image(img, directory / name)
        names.append(name)
    entries = [ManifestEntry("hiding", names[i:i + k], {}, f"sample{i // k:04d}")
               for i in range(0, count - k + 1, k)]
    manifest = directory / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest
