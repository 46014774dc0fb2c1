"""Manifest loading, image normalization, augmentation, batching and synthetic data."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLIT_TAGS = ("pretrain", "train", "test")


class ManifestError(ValueError):
    pass


class ImageLoadError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    label: Optional[int] = None
    mask_path: Optional[Path] = None


@dataclass
class SampleManifest:
    entries: list[ManifestEntry]
    split_tag: str = "train"
    source: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def task(self) -> str:
        """'cls', 'seg' or 'pretrain', derived from what the entries carry."""
        if not self.entries:
            return "pretrain"
        first = self.entries[0]
        if first.label is not None:
            return "cls"
        if first.mask_path is not None:
            return "seg"
        return "pretrain"

    @property
    def labels(self) -> list[Optional[int]]:
        return [e.label for e in self.entries]


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: Optional[int] = None
    mask: Optional[np.ndarray] = None
    path: Optional[Path] = None


@dataclass
class Batch:
    images: np.ndarray
    sample_indices: list[int]
    labels: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.images.shape[0]
        if n < 1:
            raise ValueError("a batch needs at least one sample")
        if len(self.sample_indices) != n:
            raise ValueError("sample_indices length does not match images")
        for name in ("labels", "masks"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ValueError(f"{name} length does not match images")

    def __len__(self) -> int:
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _row_kind(row: list[str]) -> str:
    if len(row) == 1:
        return "pretrain"
    try:
        int(row[1])
    except ValueError:
        return "seg"
    return "cls"


def load_manifest(path, split_tag: str = "train", check_files: bool = True) -> SampleManifest:
    """Parse a headerless UTF-8 manifest CSV.

    Rows are ``image`` (pretraining), ``image,<int label>`` (classification)
    or ``image,mask`` (segmentation). Relative paths resolve against the
    manifest's directory. Every row must be of the same kind.
    """
    path = Path(path)
    if split_tag not in SPLIT_TAGS:
        raise ManifestError(f"unknown split tag {split_tag!r}")
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent

    entries: list[ManifestEntry] = []
    kind = None
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for rownum, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row]
            if not row or all(c == "" for c in row):
                continue
            if width is None:
                width = len(row)
                if width not in (1, 2):
                    raise ManifestError(f"row {rownum}: expected 1 or 2 columns, got {width}")
            elif len(row) != width:
                raise ManifestError(f"row {rownum}: expected {width} columns, got {len(row)}")
            if row[0] == "":
                raise ManifestError(f"row {rownum}: empty image path")
            row_kind = _row_kind(row)
            if kind is None:
                kind = row_kind
            elif row_kind != kind:
                raise ManifestError(
                    f"row {rownum}: mixed task types ({row_kind} row in a {kind} manifest)"
                )
            image_path = base / row[0]
            if check_files and not image_path.is_file():
                raise ManifestError(f"row {rownum}: image not found: {image_path}")
            label = None
            mask_path = None
            if row_kind == "cls":
                label = int(row[1])
                if label < 0:
                    raise ManifestError(f"row {rownum}: negative label {label}")
            elif row_kind == "seg":
                mask_path = base / row[1]
                if check_files and not mask_path.is_file():
                    raise ManifestError(f"row {rownum}: mask not found: {mask_path}")
            entries.append(ManifestEntry(image_path, label, mask_path))

    if not entries:
        raise ManifestError(f"{path}: no entries")
    return SampleManifest(entries, split_tag=split_tag, source=path)


def write_manifest(manifest: SampleManifest, path) -> Path:
    """Write ``manifest`` as CSV with paths relative to the manifest file."""
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for e in manifest.entries:
            row = [_relpath(e.image_path, base)]
            if e.label is not None:
                row.append(str(e.label))
            elif e.mask_path is not None:
                row.append(_relpath(e.mask_path, base))
            writer.writerow(row)
    return path


def _relpath(p: Path, base: Path) -> str:
    p = Path(p).resolve()
    try:
        return p.relative_to(base).as_posix()
    except ValueError:
        return p.as_posix()


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2D float array; returns the input unchanged when sizes match."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape == (height, width):
        return arr.copy()
    img = Image.fromarray(arr.astype(np.float32), mode="F")
    return np.asarray(img.resize((width, height), Image.BILINEAR), dtype=np.float64)


def minmax_normalize(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def _read_array(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("RGB", "RGBA", "P", "CMYK", "YCbCr", "LA", "PA"):
                rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
                arr = rgb.mean(axis=-1)
            elif img.mode == "1":
                arr = np.asarray(img.convert("L"), dtype=np.float64)
            else:
                arr = np.asarray(img, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ImageLoadError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim != 2 or arr.size == 0:
        raise ImageLoadError(f"{path}: zero-sized or non-2D image {arr.shape}")
    return arr


def load_image(path, working_size: int = 256) -> ImageSample:
    """Load a raster as single-channel, resized to working_size², min-max normalized."""
    arr = _read_array(path)
    arr = resize_bilinear(arr, working_size, working_size)
    return ImageSample(pixels=minmax_normalize(arr), path=Path(path))


def load_mask(path, working_size: int = 256) -> np.ndarray:
    """Binary mask (nonzero = foreground), nearest-neighbour resized."""
    arr = _read_array(path)
    binary = (arr != 0).astype(np.uint8)
    if binary.shape != (working_size, working_size):
        img = Image.fromarray(binary * 255, mode="L")
        img = img.resize((working_size, working_size), Image.NEAREST)
        binary = (np.asarray(img) != 0).astype(np.uint8)
    return binary


def load_samples(manifest: SampleManifest, working_size: int = 256) -> list[ImageSample]:
    samples = []
    for entry in manifest.entries:
        sample = load_image(entry.image_path, working_size)
        sample.label = entry.label
        if entry.mask_path is not None:
            sample.mask = load_mask(entry.mask_path, working_size)
        samples.append(sample)
    return samples


def save_image(pixels: np.ndarray, path) -> Path:
    """Quantize [0,1] pixels to an 8-bit grayscale PNG."""
    path = Path(path)
    q = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path)
    return path


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample random substream keyed by (run seed, epoch or step, dataset index)."""
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def augment(
    sample: ImageSample,
    rng: np.random.Generator,
    flip_p: float = 0.5,
    scale: tuple[float, float] = (0.8, 1.0),
) -> ImageSample:
    """Random horizontal flip then a square random-resized crop.

    The crop keeps ``scale`` of the image area and is resized back to the
    original size. Labels and masks are passed through untouched.
    """
    x = np.asarray(sample.pixels, dtype=np.float64)
    h, w = x.shape
    if rng.random() < flip_p:
        x = x[:, ::-1]
    s = rng.uniform(scale[0], scale[1])
    ch = min(h, max(1, int(round(h * math.sqrt(s)))))
    cw = min(w, max(1, int(round(w * math.sqrt(s)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    x = resize_bilinear(x[top : top + ch, left : left + cw], h, w)
    return replace(sample, pixels=np.clip(x, 0.0, 1.0))


def make_batches(
    data,
    batch_size: int,
    shuffle: bool = False,
    rng: Optional[np.random.Generator] = None,
    working_size: int = 256,
) -> list[Batch]:
    """Split one epoch of ``data`` into batches.

    ``data`` is a SampleManifest (images are loaded) or a sequence of
    already-loaded ImageSamples. Every index appears exactly once.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    samples = load_samples(data, working_size) if isinstance(data, SampleManifest) else list(data)
    if not samples:
        raise ValueError("cannot batch an empty dataset")
    order = np.arange(len(samples))
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True needs an rng")
        order = rng.permutation(len(samples))
    return [collate(samples, order[i : i + batch_size].tolist()) for i in range(0, len(order), batch_size)]


def collate(samples: Sequence[ImageSample], indices: Sequence[int]) -> Batch:
    chosen = [samples[i] for i in indices]
    images = np.stack([s.pixels for s in chosen]).astype(np.float64)
    labels = None
    masks = None
    if all(s.label is not None for s in chosen):
        labels = np.array([s.label for s in chosen], dtype=np.int64)
    if all(s.mask is not None for s in chosen):
        masks = np.stack([s.mask for s in chosen]).astype(np.uint8)
    return Batch(images=images, sample_indices=list(indices), labels=labels, masks=masks)


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    """Deterministic sample order for one epoch."""
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([int(seed), int(epoch), 0x5EED]).permutation(n)


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

SYNTH_KINDS = ("recon", "cls2", "seg-shapes")


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy, xx


def _blobs(size: int, rng: np.random.Generator, n_blobs: int, sigma_range=(0.08, 0.25)) -> np.ndarray:
    yy, xx = _grid(size)
    img = np.zeros((size, size))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, 2)
        sigma = rng.uniform(*sigma_range) * size
        amp = rng.uniform(0.3, 1.0)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return img


def ellipse_mask(size: int, cy: float, cx: float, ry: float, rx: float, theta: float) -> np.ndarray:
    """Pixels whose centres fall inside the rotated ellipse."""
    yy, xx = _grid(size)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return ((u / rx) ** 2 + (v / ry) ** 2 <= 1.0).astype(np.uint8)


def _finish(img: np.ndarray) -> np.ndarray:
    # exact 0 and 1 survive 8-bit quantization, so reloading is lossless up to rounding
    return minmax_normalize(img)


def synth_image(kind: str, index: int, size: int, rng: np.random.Generator):
    """One synthetic sample: (pixels, label or None, mask or None, params)."""
    if kind == "recon":
        # wide blobs: smooth on the scale of the largest corruption block
        return _finish(_blobs(size, rng, int(rng.integers(2, 5)), (0.15, 0.35))), None, None, {}
    if kind == "cls2":
        label = index % 2
        yy, xx = _grid(size)
        base = 0.35 * _blobs(size, rng, 3)
        r = rng.uniform(0.08, 0.14) * size
        cx = rng.uniform(0.25, 0.75) * size
        cy = rng.uniform(0.15, 0.35) * size if label == 0 else rng.uniform(0.65, 0.85) * size
        disc = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r**2).astype(np.float64)
        return _finish(base + disc), label, None, {"cy": cy, "cx": cx, "r": r}
    if kind == "seg-shapes":
        params = {
            "cy": rng.uniform(0.35, 0.65) * size,
            "cx": rng.uniform(0.35, 0.65) * size,
            "ry": rng.uniform(0.15, 0.3) * size,
            "rx": rng.uniform(0.15, 0.3) * size,
            "theta": rng.uniform(0, math.pi),
        }
        mask = ellipse_mask(size, **params)
        background = 0.3 * _blobs(size, rng, 2)
        img = background + 0.6 * mask
        return _finish(img), None, mask, params
    raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")


def synth_dataset(
    kind: str,
    count: int,
    out_dir,
    seed: int = 0,
    size: int = 64,
    rng: Optional[np.random.Generator] = None,
) -> SampleManifest:
    """Write ``count`` synthetic PNGs (and masks) plus ``manifest.csv`` into ``out_dir``.

    recon: smooth random blobs. cls2: a bright disc in the upper half
    (label 0) or lower half (label 1), alternating so classes balance.
    seg-shapes: one ellipse per image with its exact binary mask.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    if rng is None:
        rng = np.random.default_rng(seed)

    entries = []
    for i in range(count):
        pixels, label, mask, _ = synth_image(kind, i, size, rng)
        img_path = save_image(pixels, out_dir / f"{kind}_{i:05d}.png")
        mask_path = None
        if mask is not None:
            mask_path = out_dir / f"{kind}_{i:05d}_mask.png"
            Image.fromarray(mask * 255, mode="L").save(mask_path)
        entries.append(ManifestEntry(img_path, label, mask_path))
    split = "pretrain" if kind == "recon" else "train"
    manifest = SampleManifest(entries, split_tag=split)
    manifest.source = write_manifest(manifest, out_dir / "manifest.csv")
    logger.info("wrote %d %s samples to %s", count, kind, out_dir)
    return manifest


def iter_epoch_batches(
    samples: Sequence[ImageSample], batch_size: int, seed: int, epoch: int, shuffle: bool = True
) -> Iterator[Batch]:
    order = epoch_order(len(samples), seed, epoch, shuffle)
    for i in range(0, len(order), batch_size):
        yield collate(samples, order[i : i + batch_size].tolist())
