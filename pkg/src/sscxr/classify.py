"""Classification fine-tuning on the class-token feature."""

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
from .metrics import softmax
from .pretrain import lr_at, make_optimizer, set_lr
from .vit import EncoderConfig, NonFiniteError, VisionTransformer, trunc_normal_

logger = logging.getLogger(__name__)


class HeadConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClsHeadConfig:
    num_classes: int = 2
    init: str = "scratch"  # or "from-checkpoint"

    def __post_init__(self):
        if self.num_classes < 2:
            raise HeadConfigError("num_classes must be >= 2")
        if self.init not in ("scratch", "from-checkpoint"):
            raise HeadConfigError(f"unknown init {self.init!r}")


@dataclass
class FinetuneConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 0.05
    min_lr: float = 1e-6
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    max_steps: Optional[int] = None
    linear_probe: bool = False
    class_weights: bool = False
    stop_at_train_accuracy: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


class Classifier(nn.Module):
    def __init__(self, encoder: VisionTransformer, num_classes: int):
        super().__init__()
        if not encoder.config.use_class_token:
            raise HeadConfigError("classification needs an encoder with a class token")
        self.encoder = encoder
        self.head = nn.Linear(encoder.config.embed_dim, num_classes)
        trunc_normal_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def num_classes(self) -> int:
        return self.head.out_features

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images).tokens[:, 0]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images))


def attach_cls_head(
    encoder_source,
    head_config: ClsHeadConfig,
    encoder_config: Optional[EncoderConfig] = None,
    seed: int = 0,
) -> Classifier:
    """Build a classifier from a Checkpoint (its encoder weights) or fresh weights.

    ``encoder_source`` is a Checkpoint, an EncoderConfig or None (then
    ``encoder_config`` must be given). The head is always freshly
    initialized from ``seed``; the encoder is freshly initialized from the
    same seed before any checkpoint weights are copied in, so scratch and
    checkpoint models differ only in encoder weights.
    """
    if isinstance(encoder_source, Checkpoint):
        if encoder_config is not None and config_hash(encoder_config) != config_hash(encoder_source.encoder_config):
            raise HeadConfigError("checkpoint encoder config does not match the requested config")
        encoder_config = encoder_source.encoder_config
    elif isinstance(encoder_source, EncoderConfig):
        encoder_config = encoder_source
    if encoder_config is None:
        raise HeadConfigError("no encoder config given")
    if not encoder_config.use_class_token:
        raise HeadConfigError("classification needs an encoder with a class token")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Classifier(VisionTransformer(encoder_config), head_config.num_classes)
    if isinstance(encoder_source, Checkpoint):
        load_module_arrays(model.encoder, encoder_source.subset("encoder"))
    return model


def predict_logits(model: Classifier, images, batch_size: int = 64) -> np.ndarray:
    model.eval()
    images = np.asarray(images)
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(images[i : i + batch_size], dtype=torch.float32)
            out.append(model(x).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.num_classes))


def predict_proba(model: Classifier, images, batch_size: int = 64) -> np.ndarray:
    """Softmax class probabilities, N x num_classes."""
    images = np.asarray(images)
    size = model.encoder.config.image_size
    if images.ndim != 3 or images.shape[1:] != (size, size):
        raise ValueError(f"expected N x {size} x {size} images, got {images.shape}")
    return softmax(predict_logits(model, images, batch_size), axis=1)


def train_accuracy(model: Classifier, images, labels) -> float:
    preds = predict_logits(model, images).argmax(axis=1)
    return 100.0 * float(np.mean(preds == np.asarray(labels)))


@dataclass
class FinetuneResult:
    model: Classifier
    checkpoint: Checkpoint
    loss_history: list = field(default_factory=list)
    accuracy_history: list = field(default_factory=list)  # train accuracy after each step

    @property
    def steps(self) -> int:
        return len(self.loss_history)

    def steps_to_accuracy(self, target: float = 100.0) -> Optional[int]:
        """First step (1-based) after which train accuracy reached ``target``."""
        for i, acc in enumerate(self.accuracy_history, start=1):
            if acc >= target:
                return i
        return None


def _inverse_frequency(labels: np.ndarray, num_classes: int) -> torch.Tensor:
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    w = np.where(counts > 0, labels.size / (num_classes * np.maximum(counts, 1)), 0.0)
    return torch.as_tensor(w, dtype=torch.float32)


def finetune_cls(
    data,
    model: Classifier,
    config: FinetuneConfig = FinetuneConfig(),
    track_accuracy: bool = True,
) -> FinetuneResult:
    """Full fine-tuning with cross-entropy, AdamW and cosine decay.

    The weights with the lowest epoch-mean training loss are restored into
    ``model`` at the end and returned as a checkpoint.
    """
    size = model.encoder.config.image_size
    samples = data_mod.load_samples(data, size) if isinstance(data, data_mod.SampleManifest) else list(data)
    if not samples:
        raise ValueError("no training samples")
    labels = np.array([s.label if s.label is not None else -1 for s in samples], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.num_classes:
        bad = labels[(labels < 0) | (labels >= model.num_classes)][0]
        raise ValueError(f"label {bad} outside [0, {model.num_classes})")
    images = np.stack([s.pixels for s in samples])

    if config.linear_probe:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    optimizer = make_optimizer(model, config.learning_rate, config.weight_decay)
    weight = _inverse_frequency(labels, model.num_classes) if config.class_weights else None

    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    total = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total = min(total, config.max_steps)

    losses: list[float] = []
    accs: list[float] = []
    best_loss = math.inf
    best_state = copy.deepcopy(model.state_dict())
    step = 0
    done = False
    for epoch in range(config.epochs):
        epoch_losses = []
        for batch in data_mod.iter_epoch_batches(samples, config.batch_size, config.seed, epoch):
            if step >= total:
                done = True
                break
            model.train()
            set_lr(optimizer, lr_at(step, total, config.learning_rate, config.min_lr))
            x = torch.as_tensor(batch.images, dtype=torch.float32)
            y = torch.as_tensor(batch.labels)
            loss = F.cross_entropy(model(x), y, weight=weight)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite classification loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            losses.append(float(loss.detach()))
            epoch_losses.append(losses[-1])
            if track_accuracy:
                accs.append(train_accuracy(model, images, labels))
        if epoch_losses and np.mean(epoch_losses) < best_loss:
            best_loss = float(np.mean(epoch_losses))
            best_state = copy.deepcopy(model.state_dict())
        if done or step >= total:
            break
        if (
            config.stop_at_train_accuracy is not None
            and accs
            and accs[-1] >= config.stop_at_train_accuracy
        ):
            break

    model.load_state_dict(best_state)
    if config.linear_probe:
        for p in model.encoder.parameters():
            p.requires_grad_(True)
    ckpt = classifier_checkpoint(model, config, losses)
    return FinetuneResult(model, ckpt, losses, accs)


def classifier_checkpoint(model: Classifier, config: FinetuneConfig, losses: Sequence[float]) -> Checkpoint:
    arrays = module_arrays(model.encoder, "encoder")
    arrays.update(module_arrays(model.head, "head"))
    return Checkpoint(
        encoder_config=model.encoder.config,
        arrays=arrays,
        provenance={
            "seed": config.seed,
            "steps_completed": len(losses),
            "loss_history": [float(v) for v in losses],
            "config_hash": config_hash(model.encoder.config),
        },
        meta={"task": "cls", "num_classes": model.num_classes, "finetune_config": config.to_dict()},
    )


def load_classifier(ckpt: Checkpoint) -> Classifier:
    if ckpt.task != "cls":
        raise HeadConfigError(f"checkpoint task is {ckpt.task!r}, not 'cls'")
    model = Classifier(VisionTransformer(ckpt.encoder_config), int(ckpt.meta["num_classes"]))
    load_module_arrays(model.encoder, ckpt.subset("encoder"))
    load_module_arrays(model.head, ckpt.subset("head"))
    return model
