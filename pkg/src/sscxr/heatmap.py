"""Attention heatmaps: rollout across layers, or one raw layer/head."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from .data import resize_bilinear
from .vit import VisionTransformer


def attention_rollout(attentions: Sequence[np.ndarray]) -> np.ndarray:
    """Roll head-averaged attention through the layers.

    Each layer's (heads, L, L) weights are averaged over heads, the
    identity is added for the residual path and rows are renormalized;
    the result is A_L @ ... @ A_1.
    """
    rollout = None
    for attn in attentions:
        a = np.asarray(attn, dtype=np.float64)
        if a.ndim != 3 or a.shape[1] != a.shape[2]:
            raise ValueError(f"expected (heads, L, L) attention, got {a.shape}")
        a = a.mean(axis=0) + np.eye(a.shape[1])
        a = a / a.sum(axis=1, keepdims=True)
        rollout = a if rollout is None else a @ rollout
    if rollout is None:
        raise ValueError("no attention maps given")
    return rollout


def encoder_attentions(encoder: VisionTransformer, image: np.ndarray) -> list[np.ndarray]:
    """Per-layer (heads, L, L) attention for one H x W image, as float64."""
    encoder.eval()
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(image)[None], dtype=torch.float32)
        out = encoder(x, capture_attention=True)
    return [a[0].double().numpy() for a in out.attentions]


def _normalize(grid: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    lo, hi = float(grid.min()), float(grid.max())
    # near-constant maps would otherwise blow rounding noise up to full range
    if hi - lo <= rtol * max(abs(hi), abs(lo), 1e-300):
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def class_token_heatmap(
    encoder: VisionTransformer,
    image: np.ndarray,
    layer: Optional[int] = None,
    head: Optional[int] = None,
) -> np.ndarray:
    """H x W map in [0, 1] of how much the class token attends to each patch.

    Uses attention rollout by default; with ``layer`` (1-based) and
    ``head`` it shows that single raw attention map instead.
    """
    cfg = encoder.config
    if not cfg.use_class_token:
        raise ValueError("heatmaps need an encoder with a class token")
    attns = encoder_attentions(encoder, image)
    if layer is None:
        row = attention_rollout(attns)[0, 1:]
    else:
        if not 1 <= layer <= len(attns):
            raise ValueError(f"layer {layer} outside 1..{len(attns)}")
        h = 0 if head is None else head
        if not 0 <= h < attns[layer - 1].shape[0]:
            raise ValueError(f"head {h} outside 0..{attns[layer - 1].shape[0] - 1}")
        row = attns[layer - 1][h, 0, 1:]
    g = cfg.grid_size
    up = resize_bilinear(row.reshape(g, g), cfg.image_size, cfg.image_size)
    return _normalize(up)


def overlay(image: np.ndarray, heat: np.ndarray, alpha: float = 0.45, cmap: str = "jet") -> np.ndarray:
    """RGB uint8 blend of a grayscale image and a colormapped heatmap."""
    gray = np.repeat(np.clip(np.asarray(image, dtype=np.float64), 0, 1)[..., None], 3, axis=-1)
    color = colormaps[cmap](np.clip(heat, 0, 1))[..., :3]
    blend = (1 - alpha) * gray + alpha * color
    return np.clip(np.rint(blend * 255), 0, 255).astype(np.uint8)


def contour_overlay(image: np.ndarray, pred_mask: np.ndarray, gt_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """RGB uint8 image with predicted mask outline in yellow and ground truth in green."""
    from .metrics import boundary

    rgb = np.repeat(np.clip(np.asarray(image, dtype=np.float64), 0, 1)[..., None], 3, axis=-1)
    rgb = np.rint(rgb * 255).astype(np.uint8)
    if gt_mask is not None:
        rgb[boundary(gt_mask)] = (0, 255, 0)
    rgb[boundary(pred_mask)] = (255, 255, 0)
    return rgb


def save_rgb(rgb: np.ndarray, path) -> Path:
    path = Path(path)
    Image.fromarray(rgb, mode="RGB").save(path)
    return path
