"""Group-masked image corruption.

Connected rectangular groups of patches are drawn until a target fraction
of the patch grid is covered; covered patches are replaced by uniform noise
or by the co-located patches of another image in the batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

MODES = ("noise-only", "alien-only", "per-sample-choice", "both")


@dataclass(frozen=True)
class CorruptionSpec:
    noise_fraction: float = 0.70
    alien_fraction: float = 0.35
    mode: str = "per-sample-choice"
    group_area: tuple[int, int] = (4, 25)
    group_aspect: tuple[float, float] = (1 / 3, 3.0)

    def __post_init__(self):
        for name in ("noise_fraction", "alien_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mode not in MODES:
            raise ValueError(f"unknown corruption mode {self.mode!r}; expected one of {MODES}")
        lo, hi = self.group_area
        if not 1 <= lo <= hi:
            raise ValueError(f"bad group_area range {self.group_area}")
        alo, ahi = self.group_aspect
        if not 0 < alo <= ahi:
            raise ValueError(f"bad group_aspect range {self.group_aspect}")
        object.__setattr__(self, "group_area", (int(lo), int(hi)))
        object.__setattr__(self, "group_aspect", (float(alo), float(ahi)))

    @property
    def max_group_area(self) -> int:
        return self.group_area[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_area"] = list(self.group_area)
        d["group_aspect"] = list(self.group_aspect)
        return d


@dataclass
class PatchMask:
    grid: np.ndarray  # (gh, gw) uint8
    blocks: list = field(default_factory=list)  # (row, col, height, width) per placed block

    @property
    def coverage(self) -> float:
        return float(self.grid.mean()) if self.grid.size else 0.0

    def pixel_mask(self, patch_size: int) -> np.ndarray:
        return np.kron(self.grid, np.ones((patch_size, patch_size), dtype=np.uint8))


def _block_shape(spec: CorruptionSpec, grid_h: int, grid_w: int, rng: np.random.Generator):
    lo, hi = spec.group_area
    area = rng.uniform(lo, hi)
    log_lo, log_hi = math.log(spec.group_aspect[0]), math.log(spec.group_aspect[1])
    aspect = math.exp(rng.uniform(log_lo, log_hi))  # height / width
    h = max(1, min(grid_h, int(round(math.sqrt(area * aspect)))))
    w = max(1, min(grid_w, int(round(math.sqrt(area / aspect)))))
    # rounding can push h*w past the largest allowed area
    while h * w > hi:
        if h >= w:
            h -= 1
        else:
            w -= 1
    return h, w


def sample_group_mask(
    grid_h: int,
    grid_w: int,
    target_fraction: float,
    spec: CorruptionSpec,
    rng: np.random.Generator,
) -> PatchMask:
    """Place random rectangular patch blocks until coverage reaches ``target_fraction``.

    Block positions are uniform over the grid and blocks may overlap, so the
    final coverage overshoots the target by at most one block.
    """
    if not 0.0 <= target_fraction <= 1.0:
        raise ValueError(f"target_fraction must lie in [0, 1], got {target_fraction}")
    grid = np.zeros((grid_h, grid_w), dtype=np.uint8)
    total = grid_h * grid_w
    need = math.ceil(target_fraction * total - 1e-9)
    blocks = []
    marked = 0
    while marked < need:
        h, w = _block_shape(spec, grid_h, grid_w, rng)
        r = int(rng.integers(0, grid_h - h + 1))
        c = int(rng.integers(0, grid_w - w + 1))
        grid[r : r + h, c : c + w] = 1
        blocks.append((r, c, h, w))
        marked = int(grid.sum())
    return PatchMask(grid, blocks)


def _check_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError(f"expected an N x H x W batch, got shape {images.shape}")
    return images


def corrupt_images(
    images: np.ndarray,
    spec: CorruptionSpec,
    patch_size: int,
    rng: np.random.Generator,
    return_info: bool = False,
):
    """Corrupt an N x H x W batch; returns (corrupted, pixel mask M).

    Each sample gets its own child generator spawned from ``rng`` so its
    corruption does not depend on processing order. With ``return_info``
    a third element lists, per sample, the corruption kinds, the donor
    index (alien only) and the patch grids used.
    """
    images = _check_images(images)
    n, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size

    wants_alien = spec.mode in ("alien-only", "both") and spec.alien_fraction > 0
    if wants_alien and n < 2:
        raise ValueError("alien-patch corruption needs a batch of at least 2 images")

    out = images.copy()
    masks = np.zeros((n, h, w), dtype=np.uint8)
    info = []
    for k, child in enumerate(rng.spawn(n)):
        kinds = _corruption_kinds(spec, n, child)
        record = {"kinds": kinds, "donor": None, "noise_grid": None, "alien_grid": None}
        info.append(record)
        noise_grid = np.zeros((gh, gw), dtype=np.uint8)
        if "noise" in kinds:
            noise_grid = sample_group_mask(gh, gw, spec.noise_fraction, spec, child).grid
            record["noise_grid"] = noise_grid
            m = np.kron(noise_grid, np.ones((patch_size, patch_size), dtype=np.uint8)).astype(bool)
            out[k][m] = child.uniform(0.0, 1.0, size=int(m.sum()))
            masks[k][m] = 1
        if "alien" in kinds and n >= 2:
            alien_grid = sample_group_mask(gh, gw, spec.alien_fraction, spec, child).grid
            alien_grid = alien_grid & (1 - noise_grid)
            donor = int(child.integers(0, n - 1))
            if donor >= k:
                donor += 1
            record["donor"], record["alien_grid"] = donor, alien_grid
            m = np.kron(alien_grid, np.ones((patch_size, patch_size), dtype=np.uint8)).astype(bool)
            out[k][m] = images[donor][m]
            masks[k][m] = 1
    if return_info:
        return out, masks, info
    return out, masks


def _corruption_kinds(spec: CorruptionSpec, n: int, rng: np.random.Generator) -> tuple[str, ...]:
    if spec.mode == "noise-only":
        return ("noise",)
    if spec.mode == "alien-only":
        return ("alien",)
    if spec.mode == "both":
        return ("noise", "alien")
    # per-sample-choice: a single image has no donor, so it always gets noise
    if n < 2:
        return ("noise",)
    return ("noise",) if rng.random() < 0.5 else ("alien",)


def apply_corruption(batch, spec: CorruptionSpec, rng: np.random.Generator, patch_size: int = 16):
    """Corrupt a :class:`~sscxr.data.Batch`; see :func:`corrupt_images`."""
    return corrupt_images(batch.images, spec, patch_size, rng)
