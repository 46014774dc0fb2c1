"""Self-supervised group-masked autoencoder pretraining of vision transformers for chest X-rays."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corruption import CorruptionSpec, corrupt_images
from .data import load_manifest, synth_dataset
from .vit import EncoderConfig, VisionTransformer, build_encoder

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CorruptionSpec",
    "EncoderConfig",
    "VisionTransformer",
    "build_encoder",
    "corrupt_images",
    "load_checkpoint",
    "load_manifest",
    "save_checkpoint",
    "synth_dataset",
]
