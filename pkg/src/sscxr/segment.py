"""UNETR-style 2D segmentation over multi-depth encoder features.

Decoder schedule, for patch size p = 2**k, grid g = image_size / p and
taps t_1 < ... < t_T (T >= 2):

* the deepest tap t_T enters as a (d, g, g) feature map;
* fusion stage j = 1 .. T-1 merges tap t_{T-j}; it runs at resolution
  g * 2**min(j, k), reached by one x2 transposed convolution when the
  resolution grows and a 1x1 convolution otherwise. The skip branch lifts
  its tap from g to that resolution with min(j, k) stacked x2 transposed
  convolutions. Stage j has feature_size * 2**(T-j) channels;
* a final stage upsamples to the full image, merges a convolutional
  stem over the raw image (feature_size channels) and a 1x1 convolution
  emits one logit per pixel.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data as data_mod
from .checkpoint import Checkpoint, config_hash, load_module_arrays, module_arrays
from .metrics import dice as dice_metric
from .pretrain import lr_at, make_optimizer, set_lr
from .vit import EncoderConfig, NonFiniteError, VisionTransformer

logger = logging.getLogger(__name__)


class SegConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SegDecoderConfig:
    tap_layers: tuple[int, ...] = (3, 6, 9, 12)
    feature_size: int = 16

    def to_dict(self) -> dict:
        return {"tap_layers": list(self.tap_layers), "feature_size": self.feature_size}

    @classmethod
    def from_dict(cls, d: dict) -> "SegDecoderConfig":
        return cls(tuple(d["tap_layers"]), int(d["feature_size"]))


def default_taps(depth: int, count: int = 4) -> tuple[int, ...]:
    """Evenly spaced tap layers ending at the last layer, e.g. (3, 6, 9, 12) for depth 12."""
    count = min(count, depth)
    return tuple(int(round(depth * (i + 1) / count)) for i in range(count))


def _log2_patch(p: int) -> int:
    k = int(round(math.log2(p)))
    if 2**k != p or k < 1:
        raise SegConfigError(f"patch size {p} must be a power of two >= 2")
    return k


def stage_schedule(encoder_config: EncoderConfig, config: SegDecoderConfig) -> list[dict]:
    """Resolution and channel width of every decoder stage (see module docstring)."""
    taps = tuple(config.tap_layers)
    if len(taps) < 2 or list(taps) != sorted(set(taps)):
        raise SegConfigError(f"tap_layers must be >= 2 strictly increasing layers, got {taps}")
    if taps[0] < 1 or taps[-1] > encoder_config.depth:
        raise SegConfigError(f"tap_layers {taps} outside 1..{encoder_config.depth}")
    k = _log2_patch(encoder_config.patch_size)
    g = encoder_config.grid_size
    T = len(taps)
    stages = []
    for j in range(1, T):
        stages.append(
            {
                "tap": taps[T - 1 - j],
                "resolution": g * 2 ** min(j, k),
                "skip_upsamples": min(j, k),
                "channels": config.feature_size * 2 ** (T - j),
            }
        )
    stages.append({"tap": None, "resolution": encoder_config.image_size, "skip_upsamples": 0, "channels": config.feature_size})
    return stages


class ConvBlock(nn.Module):
    """Two 3x3 conv + instance norm + LeakyReLU layers."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.InstanceNorm2d(cout, affine=True),
            nn.LeakyReLU(0.01),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.InstanceNorm2d(cout, affine=True),
            nn.LeakyReLU(0.01),
        )

    def forward(self, x):
        return self.net(x)


class SkipBranch(nn.Module):
    """Lift a (d, g, g) token map by ``n_up`` x2 transposed convolutions."""

    def __init__(self, cin: int, cout: int, n_up: int):
        super().__init__()
        layers: list[nn.Module] = []
        c = cin
        for _ in range(n_up):
            layers += [nn.ConvTranspose2d(c, cout, 2, stride=2), nn.Conv2d(cout, cout, 3, padding=1),
                       nn.InstanceNorm2d(cout, affine=True), nn.LeakyReLU(0.01)]
            c = cout
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Upsample(nn.Module):
    def __init__(self, cin: int, cout: int, factor: int):
        super().__init__()
        if factor == 1:
            self.net = nn.Conv2d(cin, cout, 1)
        else:
            n = int(round(math.log2(factor)))
            layers: list[nn.Module] = []
            c = cin
            for _ in range(n):
                layers.append(nn.ConvTranspose2d(c, cout, 2, stride=2))
                c = cout
            self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class UNETRDecoder(nn.Module):
    def __init__(self, encoder_config: EncoderConfig, config: SegDecoderConfig):
        super().__init__()
        self.encoder_config = encoder_config
        self.config = config
        self.schedule = stage_schedule(encoder_config, config)
        d = encoder_config.embed_dim
        g = encoder_config.grid_size
        self.skips = nn.ModuleList()
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        prev_c, prev_r = d, g
        for st in self.schedule[:-1]:
            c = st["channels"]
            self.skips.append(SkipBranch(d, c, st["skip_upsamples"]))
            self.ups.append(Upsample(prev_c, c, st["resolution"] // prev_r))
            self.fuse.append(ConvBlock(2 * c, c))
            prev_c, prev_r = c, st["resolution"]
        f = config.feature_size
        self.stem = ConvBlock(1, f)
        self.final_up = Upsample(prev_c, f, encoder_config.image_size // prev_r)
        self.final_fuse = ConvBlock(2 * f, f)
        self.out = nn.Conv2d(f, 1, 1)

    def _grid(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, d = tokens.shape
        g = self.encoder_config.grid_size
        return tokens.transpose(1, 2).reshape(b, d, g, g)

    def forward(self, images: torch.Tensor, features: dict, trace: Optional[list] = None) -> torch.Tensor:
        """images (B, H, W); features {layer: (B, n, d) patch tokens} -> (B, H, W) logits."""
        taps = self.config.tap_layers
        x = self._grid(features[taps[-1]])
        if trace is not None:
            trace.append(tuple(x.shape[-2:]))
        for st, skip, up, fuse in zip(self.schedule[:-1], self.skips, self.ups, self.fuse):
            s = skip(self._grid(features[st["tap"]]))
            x = fuse(torch.cat([up(x), s], dim=1))
            if trace is not None:
                trace.append(tuple(x.shape[-2:]))
        stem = self.stem(images[:, None])
        x = self.final_fuse(torch.cat([self.final_up(x), stem], dim=1))
        if trace is not None:
            trace.append(tuple(x.shape[-2:]))
        return self.out(x)[:, 0]


class Segmenter(nn.Module):
    def __init__(self, encoder: VisionTransformer, config: Optional[SegDecoderConfig] = None):
        super().__init__()
        if config is None:
            config = SegDecoderConfig(tap_layers=default_taps(encoder.config.depth))
        self.encoder = encoder
        self.decoder = UNETRDecoder(encoder.config, config)

    def forward(self, images: torch.Tensor, trace: Optional[list] = None) -> torch.Tensor:
        out = self.encoder(images, capture_layers=self.decoder.config.tap_layers)
        feats = {k: self.encoder.patch_tokens(v) for k, v in out.features.items()}
        return self.decoder(images, feats, trace)


def build_segmenter(
    encoder_source,
    config: Optional[SegDecoderConfig] = None,
    seed: int = 0,
) -> Segmenter:
    """Segmenter from a Checkpoint (encoder weights copied) or an EncoderConfig."""
    enc_cfg = encoder_source.encoder_config if isinstance(encoder_source, Checkpoint) else encoder_source
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Segmenter(VisionTransformer(enc_cfg), config)
    if isinstance(encoder_source, Checkpoint):
        load_module_arrays(model.encoder, encoder_source.subset("encoder"))
    return model


# logits clamped so float64 sigmoid stays strictly inside (0, 1)
_LOGIT_CLAMP = 30.0


def seg_forward(model: Segmenter, images, batch_size: int = 16) -> np.ndarray:
    """Foreground probability maps; accepts one H x W image or an N x H x W stack."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 2
    if single:
        images = images[None]
    size = model.encoder.config.image_size
    if images.shape[1:] != (size, size):
        raise SegConfigError(f"expected {size} x {size} images, got {images.shape[1:]}")
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            logits = model(torch.as_tensor(images[i : i + batch_size], dtype=torch.float32))
            z = logits.double().clamp(-_LOGIT_CLAMP, _LOGIT_CLAMP)
            out.append(torch.sigmoid(z).numpy())
    probs = np.concatenate(out)
    return probs[0] if single else probs


def soft_dice_bce_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Mean per-image soft Dice loss plus pixel-mean BCE, equally weighted."""
    bce = F.binary_cross_entropy_with_logits(logits, target)
    p = torch.sigmoid(logits).flatten(1)
    t = target.flatten(1)
    inter = (p * t).sum(1)
    soft_dice = (2 * inter + smooth) / (p.sum(1) + t.sum(1) + smooth)
    return bce + (1 - soft_dice).mean()


def hard_dice_batch(probs: torch.Tensor, target: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Per-image Dice of thresholded maps; both-empty counts as 1."""
    pred = (probs > threshold).flatten(1).double()
    t = target.flatten(1).double()
    inter = (pred * t).sum(1)
    denom = pred.sum(1) + t.sum(1)
    return torch.where(denom > 0, 2 * inter / denom.clamp_min(1), torch.ones_like(denom))


@dataclass
class SegFinetuneConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    min_lr: float = 1e-6
    epochs: int = 400
    batch_size: int = 16
    seed: int = 0
    max_steps: Optional[int] = None
    threshold: float = 0.5
    stop_at_train_dice: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegFinetuneResult:
    model: Segmenter
    checkpoint: Checkpoint
    loss_history: list = field(default_factory=list)
    dice_history: list = field(default_factory=list)  # mean train Dice after each epoch
    steps_history: list = field(default_factory=list)  # step count at each dice entry


def train_dice(model: Segmenter, images: np.ndarray, masks: np.ndarray, threshold: float = 0.5) -> float:
    probs = torch.as_tensor(seg_forward(model, images))
    return float(hard_dice_batch(probs, torch.as_tensor(masks), threshold).mean())


def finetune_seg(data, model: Segmenter, config: SegFinetuneConfig = SegFinetuneConfig()) -> SegFinetuneResult:
    """Train all weights with soft-Dice + BCE; keeps the lowest epoch-loss weights."""
    size = model.encoder.config.image_size
    samples = data_mod.load_samples(data, size) if isinstance(data, data_mod.SampleManifest) else list(data)
    if not samples:
        raise ValueError("no training samples")
    for i, s in enumerate(samples):
        if s.mask is None:
            raise ValueError(f"sample {i} has no mask")
        if s.mask.shape != s.pixels.shape:
            raise ValueError(f"sample {i}: mask {s.mask.shape} does not match image {s.pixels.shape}")
    images = np.stack([s.pixels for s in samples])
    masks = np.stack([s.mask for s in samples]).astype(np.float64)

    optimizer = make_optimizer(model, config.learning_rate, config.weight_decay)
    total = config.epochs * math.ceil(len(samples) / config.batch_size)
    if config.max_steps is not None:
        total = min(total, config.max_steps)

    losses, dices, steps_at = [], [], []
    best_loss = math.inf
    best_state = copy.deepcopy(model.state_dict())
    step = 0
    for epoch in range(config.epochs):
        epoch_losses = []
        for batch in data_mod.iter_epoch_batches(samples, config.batch_size, config.seed, epoch):
            if step >= total:
                break
            model.train()
            set_lr(optimizer, lr_at(step, total, config.learning_rate, config.min_lr))
            x = torch.as_tensor(batch.images, dtype=torch.float32)
            y = torch.as_tensor(batch.masks, dtype=torch.float32)
            loss = soft_dice_bce_loss(model(x), y)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite segmentation loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            losses.append(float(loss.detach()))
            epoch_losses.append(losses[-1])
        if not epoch_losses:
            break
        dices.append(train_dice(model, images, masks, config.threshold))
        steps_at.append(step)
        if np.mean(epoch_losses) < best_loss:
            best_loss = float(np.mean(epoch_losses))
            best_state = copy.deepcopy(model.state_dict())
        if step >= total:
            break
        if config.stop_at_train_dice is not None and dices[-1] >= config.stop_at_train_dice:
            break

    model.load_state_dict(best_state)
    ckpt = segmenter_checkpoint(model, config, losses)
    return SegFinetuneResult(model, ckpt, losses, dices, steps_at)


def segmenter_checkpoint(model: Segmenter, config: SegFinetuneConfig, losses: Sequence[float]) -> Checkpoint:
    arrays = module_arrays(model.encoder, "encoder")
    arrays.update(module_arrays(model.decoder, "segdecoder"))
    return Checkpoint(
        encoder_config=model.encoder.config,
        arrays=arrays,
        provenance={
            "seed": config.seed,
            "steps_completed": len(losses),
            "loss_history": [float(v) for v in losses],
            "config_hash": config_hash(model.encoder.config),
        },
        meta={
            "task": "seg",
            "seg_decoder_config": model.decoder.config.to_dict(),
            "finetune_config": config.to_dict(),
        },
    )


def load_segmenter(ckpt: Checkpoint) -> Segmenter:
    if ckpt.task != "seg":
        raise SegConfigError(f"checkpoint task is {ckpt.task!r}, not 'seg'")
    cfg = SegDecoderConfig.from_dict(ckpt.meta["seg_decoder_config"])
    model = Segmenter(VisionTransformer(ckpt.encoder_config), cfg)
    load_module_arrays(model.encoder, ckpt.subset("encoder"))
    load_module_arrays(model.decoder, ckpt.subset("segdecoder"))
    return model


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) > threshold).astype(np.uint8)


def dice_at_threshold(probs: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    return dice_metric(binarize(probs, threshold), gt)
