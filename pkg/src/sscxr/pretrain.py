"""Group-masked autoencoder pretraining.

The encoder sees a corrupted image; a light per-token MLP decoder followed
by a transposed convolution reconstructs the clean image, and the L1 error
is counted only on corrupted pixels.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import data as data_mod
from .checkpoint import Checkpoint, config_hash, load_module_arrays, module_arrays, save_checkpoint
from .corruption import CorruptionSpec, corrupt_images
from .vit import EncoderConfig, NonFiniteError, VisionTransformer, trunc_normal_

logger = logging.getLogger(__name__)

REDUCTIONS = ("sum", "mean-masked")


@dataclass(frozen=True)
class DecoderConfig:
    hidden_dims: tuple[int, ...] = (2048, 2048)
    bottleneck_dim: int = 256

    def to_dict(self) -> dict:
        return {"hidden_dims": list(self.hidden_dims), "bottleneck_dim": self.bottleneck_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(tuple(d["hidden_dims"]), int(d["bottleneck_dim"]))


@dataclass
class PretrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 0.05
    min_lr: float = 1e-6
    epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    loss_reduction: str = "mean-masked"
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    augment: bool = True
    flip_p: float = 0.5
    crop_scale: tuple[float, float] = (0.8, 1.0)
    checkpoint_every: int = 0
    warmup_steps: int = 0

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_reduction not in REDUCTIONS:
            raise ValueError(f"loss_reduction must be one of {REDUCTIONS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corruption"] = self.corruption.to_dict()
        d["crop_scale"] = list(self.crop_scale)
        return d


class ReconstructionDecoder(nn.Module):
    """Per-token MLP (GELU after each hidden layer) into a bottleneck, then a
    transposed convolution with kernel = stride = patch size back to pixels."""

    def __init__(self, encoder_config: EncoderConfig, config: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.encoder_config = encoder_config
        self.config = config
        dims = [encoder_config.embed_dim, *config.hidden_dims]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.GELU()]
        layers.append(nn.Linear(dims[-1], config.bottleneck_dim))
        self.mlp = nn.Sequential(*layers)
        p = encoder_config.patch_size
        self.to_pixels = nn.ConvTranspose2d(config.bottleneck_dim, 1, kernel_size=p, stride=p)
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                trunc_normal_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        """(B, n, d) patch tokens (no class token) -> (B, H, W) image."""
        cfg = self.encoder_config
        b, n, d = patch_tokens.shape
        if n != cfg.num_patches or d != cfg.embed_dim:
            raise ValueError(
                f"decoder expects ({cfg.num_patches}, {cfg.embed_dim}) patch tokens, got ({n}, {d})"
            )
        z = self.mlp(patch_tokens)
        g = cfg.grid_size
        z = z.transpose(1, 2).reshape(b, -1, g, g)
        return self.to_pixels(z)[:, 0]


class MaskedAutoencoder(nn.Module):
    def __init__(self, encoder_config: EncoderConfig, decoder_config: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.encoder = VisionTransformer(encoder_config)
        self.decoder = ReconstructionDecoder(encoder_config, decoder_config)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        out = self.encoder(images)
        # class token rides through the encoder but is not reconstructed
        return self.decoder(self.encoder.patch_tokens(out.tokens))


def build_autoencoder(
    encoder_config: EncoderConfig, decoder_config: DecoderConfig = DecoderConfig(), seed: int = 0
) -> MaskedAutoencoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MaskedAutoencoder(encoder_config, decoder_config)


def masked_l1_loss(x, x_bar, mask, reduction: str = "mean-masked"):
    """L1 reconstruction error restricted to pixels where ``mask`` is 1.

    ``sum`` adds |x - x_bar| over every masked pixel of every sample;
    ``mean-masked`` divides that by the number of masked pixels. An empty
    mask gives 0 under either reduction. Torch inputs return a tensor,
    anything else a float.
    """
    as_float = not isinstance(x_bar, torch.Tensor)
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    x_bar = torch.as_tensor(np.asarray(x_bar) if as_float else x_bar)
    mask = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    if not (x.shape == x_bar.shape == mask.shape):
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, x_bar {tuple(x_bar.shape)}, M {tuple(mask.shape)}")
    if not ((mask == 0) | (mask == 1)).all():
        raise ValueError("mask must be binary")
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}")
    m = mask.to(x_bar.dtype)
    total = (m * (x.to(x_bar.dtype) - x_bar).abs()).sum()
    if reduction == "mean-masked":
        count = m.sum()
        total = total / count if count > 0 else total * 0
    return float(total) if as_float else total


def lr_at(step: int, total_steps: int, base_lr: float, min_lr: float, warmup_steps: int = 0) -> float:
    """Cosine decay from ``base_lr`` to ``min_lr`` at the last step.

    With ``warmup_steps`` the rate first ramps linearly up to ``base_lr``
    (reaching it at step ``warmup_steps``) and the cosine covers the rest.
    """
    floor = min(min_lr, base_lr)
    if step < warmup_steps:
        return base_lr * (step + 1) / (warmup_steps + 1)
    span = total_steps - warmup_steps
    if span <= 1:
        return base_lr
    t = min(step - warmup_steps, span - 1) / (span - 1)
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


def make_optimizer(model: nn.Module, lr: float, weight_decay: float) -> torch.optim.AdamW:
    """AdamW with decay on matrices only (biases, norms, embeddings are exempt)."""
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim < 2 or name.endswith(("pos_embed", "cls_token")):
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def set_lr(optimizer: torch.optim.Optimizer, lr: float):
    for g in optimizer.param_groups:
        g["lr"] = lr


def optimizer_arrays(model: nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        for key in ("exp_avg", "exp_avg_sq"):
            out[f"optim.{key}.{name}"] = state[key].detach().cpu().numpy().astype("<f4", copy=True)
    return out


def restore_optimizer(model: nn.Module, optimizer: torch.optim.Optimizer, arrays: dict, step: int):
    for name, p in model.named_parameters():
        key = f"optim.exp_avg.{name}"
        if key not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(np.array(arrays[key], dtype=np.float32)),
            "exp_avg_sq": torch.from_numpy(np.array(arrays[f"optim.exp_avg_sq.{name}"], dtype=np.float32)),
        }


def prepare_pretrain_batch(batch: data_mod.Batch, config: PretrainConfig, patch_size: int, step: int):
    """Augment and corrupt one batch; returns (clean, corrupted, M) as float32 tensors.

    Augmentation draws from a substream keyed by (seed, step, dataset index),
    corruption from one keyed by (seed, step), so results do not depend on
    where the batch was produced.
    """
    clean = []
    for img, idx in zip(batch.images, batch.sample_indices):
        sample = data_mod.ImageSample(pixels=img)
        if config.augment:
            rng = data_mod.sample_rng(config.seed, step, idx)
            sample = data_mod.augment(sample, rng, flip_p=config.flip_p, scale=config.crop_scale)
        clean.append(sample.pixels)
    clean = np.stack(clean)
    corrupt_rng = np.random.default_rng([int(config.seed), int(step), 0xC0])
    corrupted, mask = corrupt_images(clean, config.corruption, patch_size, corrupt_rng)
    f32 = torch.float32
    return torch.as_tensor(clean, dtype=f32), torch.as_tensor(corrupted, dtype=f32), torch.as_tensor(mask, dtype=f32)


def pretrain_step(
    model: MaskedAutoencoder,
    optimizer: torch.optim.Optimizer,
    batch: data_mod.Batch,
    config: PretrainConfig,
    step: int,
    total_steps: int,
) -> float:
    """One optimization step; returns the loss before the update."""
    model.train()
    clean, corrupted, mask = prepare_pretrain_batch(batch, config, model.encoder.config.patch_size, step)
    set_lr(optimizer, lr_at(step, total_steps, config.learning_rate, config.min_lr, config.warmup_steps))
    recon = model(corrupted)
    loss = masked_l1_loss(clean, recon, mask, config.loss_reduction)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"non-finite reconstruction loss at step {step}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def autoencoder_checkpoint(
    model: MaskedAutoencoder,
    optimizer: Optional[torch.optim.Optimizer],
    config: PretrainConfig,
    loss_history: Sequence[float],
    steps_completed: int,
    epochs_completed: int,
) -> Checkpoint:
    arrays = module_arrays(model.encoder, "encoder")
    arrays.update(module_arrays(model.decoder, "decoder"))
    if optimizer is not None:
        arrays.update(optimizer_arrays(model, optimizer))
    enc_cfg = model.encoder.config
    return Checkpoint(
        encoder_config=enc_cfg,
        arrays=arrays,
        provenance={
            "seed": config.seed,
            "epochs_completed": epochs_completed,
            "steps_completed": steps_completed,
            "loss_history": [float(v) for v in loss_history],
            "config_hash": config_hash(enc_cfg),
        },
        meta={
            "task": "pretrain",
            "decoder_config": model.decoder.config.to_dict(),
            "pretrain_config": config.to_dict(),
        },
    )


def write_loss_csv(history: Sequence[float], path, header: str = "loss") -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", header])
        for i, v in enumerate(history, start=1):
            w.writerow([i, repr(float(v))])
    return path


def run_pretraining(
    data,
    config: PretrainConfig,
    encoder_config: EncoderConfig,
    decoder_config: DecoderConfig = DecoderConfig(),
    out_dir=None,
    resume: Optional[Checkpoint] = None,
    stop_after_steps: Optional[int] = None,
) -> Checkpoint:
    """Pretrain an autoencoder on ``data`` (manifest or list of ImageSamples).

    Runs ``config.epochs`` epochs of :func:`pretrain_step`. When ``out_dir``
    is given and ``config.checkpoint_every`` > 0, intermediate checkpoints
    are written there. ``resume`` continues from a checkpoint written by
    this function; ``stop_after_steps`` ends the run early (the returned
    checkpoint can be resumed).
    """
    if isinstance(data, data_mod.SampleManifest):
        samples = data_mod.load_samples(data, encoder_config.image_size)
    else:
        samples = list(data)
    if not samples:
        raise ValueError("no pretraining samples")
    for s in samples:
        if s.pixels.shape != (encoder_config.image_size, encoder_config.image_size):
            raise ValueError(f"sample of shape {s.pixels.shape} does not match image_size {encoder_config.image_size}")

    model = build_autoencoder(encoder_config, decoder_config, seed=config.seed)
    optimizer = make_optimizer(model, config.learning_rate, config.weight_decay)
    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    history: list[float] = []
    start = 0
    if resume is not None:
        if config_hash(resume.encoder_config) != config_hash(encoder_config):
            raise ValueError("resume checkpoint has a different encoder config")
        load_module_arrays(model.encoder, resume.subset("encoder"))
        load_module_arrays(model.decoder, resume.subset("decoder"))
        start = int(resume.provenance["steps_completed"])
        restore_optimizer(model, optimizer, resume.arrays, start)
        history = list(resume.provenance.get("loss_history", []))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    step = 0
    for epoch in range(config.epochs):
        for batch in data_mod.iter_epoch_batches(samples, config.batch_size, config.seed, epoch):
            if step < start:
                step += 1
                continue
            if stop_after_steps is not None and step >= stop_after_steps:
                return autoencoder_checkpoint(model, optimizer, config, history, step, epoch)
            loss = pretrain_step(model, optimizer, batch, config, step, total_steps)
            history.append(loss)
            step += 1
            if step % 50 == 0 or step == total_steps:
                logger.info("pretrain step %d/%d loss %.5f", step, total_steps, loss)
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                epochs_done = step // steps_per_epoch
                ckpt = autoencoder_checkpoint(model, optimizer, config, history, step, epochs_done)
                save_checkpoint(ckpt, out_dir / f"checkpoint_step{step:06d}.sscxr")
    return autoencoder_checkpoint(model, optimizer, config, history, step, config.epochs)


def load_autoencoder(ckpt: Checkpoint) -> MaskedAutoencoder:
    dec_cfg = DecoderConfig.from_dict(ckpt.meta.get("decoder_config", DecoderConfig().to_dict()))
    model = MaskedAutoencoder(ckpt.encoder_config, dec_cfg)
    load_module_arrays(model.encoder, ckpt.subset("encoder"))
    load_module_arrays(model.decoder, ckpt.subset("decoder"))
    return model


def reconstruct(model: MaskedAutoencoder, corrupted) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(np.asarray(corrupted), dtype=torch.float32))
    return out.numpy().astype(np.float64)
