"""Patch tokenization and a pre-norm vision transformer encoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 256
    patch_size: int = 16
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    mlp_ratio: float = 4.0
    use_class_token: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def seq_len(self) -> int:
        return self.num_patches + int(self.use_class_token)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def patchify(x, p: int):
    """Split (..., H, W) into (..., n, p*p) patches in row-major patch order.

    Works for numpy arrays and torch tensors alike.
    """
    *lead, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = x.reshape(*lead, gh, p, gw, p)
    x = x.swapaxes(-3, -2)  # (..., gh, gw, p, p)
    return x.reshape(*lead, gh * gw, p * p)


def unpatchify(patches, h: int, w: int):
    """Inverse of :func:`patchify`."""
    *lead, n, pp = patches.shape
    p = int(round(pp**0.5))
    if p * p != pp:
        raise ValueError(f"patch length {pp} is not a square")
    if h % p or w % p or n != (h // p) * (w // p):
        raise ValueError(f"{n} patches of size {p} cannot tile a {h}x{w} image")
    gh, gw = h // p, w // p
    x = patches.reshape(*lead, gh, gw, p, p)
    x = x.swapaxes(-3, -2)
    return x.reshape(*lead, h, w)


def sincos_pos_embed(dim: int, grid: int, class_token: bool = False) -> np.ndarray:
    """2D sine-cosine table, (grid*grid [+1], dim); the class-token row is zero.

    Used only to initialize the learned positional embedding.
    """
    if dim % 4:
        raise ValueError(f"embed_dim {dim} must be divisible by 4 for 2D sin-cos positions")
    gy, gx = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    quarter = dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def axis(pos):
        out = np.outer(pos.ravel(), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    table = np.concatenate([axis(gy), axis(gx)], axis=1)
    if class_token:
        table = np.concatenate([np.zeros((1, dim)), table])
    return table


def trunc_normal_(t: torch.Tensor, std: float = 0.02) -> torch.Tensor:
    return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor):
        b, L, d = x.shape
        qkv = self.qkv(x).reshape(b, L, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, L, d)
        return self.proj(out), attn


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        a, attn = self.attn(self.norm1(x))
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, attn


class EncoderOutput(NamedTuple):
    tokens: torch.Tensor  # (B, L, d), final layer norm applied
    features: Optional[dict]  # {layer: (B, L, d)} raw block outputs at requested taps
    attentions: Optional[list]  # per layer (B, heads, L, L)


class VisionTransformer(nn.Module):
    """ViT encoder over single-channel images.

    Patches are flattened and linearly projected; a learned positional
    embedding (initialized from a 2D sin-cos table) is added and an
    optional class token is prepended.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Linear(config.patch_size**2, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d)) if config.use_class_token else None
        self.pos_embed = nn.Parameter(torch.zeros(1, config.seq_len, d))
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.reset_parameters()

    def reset_parameters(self):
        cfg = self.config
        if cfg.embed_dim % 4:
            trunc_normal_(self.pos_embed)
        else:
            pos = sincos_pos_embed(cfg.embed_dim, cfg.grid_size, cfg.use_class_token)
            with torch.no_grad():
                self.pos_embed.copy_(torch.as_tensor(pos, dtype=self.pos_embed.dtype)[None])
        if self.cls_token is not None:
            trunc_normal_(self.cls_token)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                trunc_normal_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def embed(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, n, p*p) patches -> (B, L, d) tokens with positions (and class token)."""
        cfg = self.config
        if patches.shape[-2:] != (cfg.num_patches, cfg.patch_size**2):
            raise ValueError(
                f"expected patches of shape (*, {cfg.num_patches}, {cfg.patch_size ** 2}), "
                f"got {tuple(patches.shape)}"
            )
        x = self.patch_embed(patches)
        if self.cls_token is not None:
            x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        return x + self.pos_embed

    def encode(
        self,
        tokens: torch.Tensor,
        capture_layers: Sequence[int] = (),
        capture_attention: bool = False,
    ) -> EncoderOutput:
        """Run the transformer blocks; layers in ``capture_layers`` are 1-based."""
        if tokens.shape[1:] != (self.config.seq_len, self.config.embed_dim):
            raise ValueError(
                f"token sequence of shape {tuple(tokens.shape[1:])} does not match "
                f"({self.config.seq_len}, {self.config.embed_dim})"
            )
        for layer in capture_layers:
            if not 1 <= layer <= self.config.depth:
                raise ValueError(f"capture layer {layer} outside 1..{self.config.depth}")
        wanted = set(capture_layers)
        features = {} if wanted else None
        attentions = [] if capture_attention else None
        x = tokens
        for i, blk in enumerate(self.blocks, start=1):
            x, attn = blk(x)
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"non-finite activations after encoder layer {i}")
            if i in wanted:
                features[i] = x
            if capture_attention:
                attentions.append(attn)
        return EncoderOutput(self.norm(x), features, attentions)

    def forward(self, images: torch.Tensor, capture_layers: Sequence[int] = (), capture_attention: bool = False):
        """(B, H, W) images -> EncoderOutput."""
        patches = patchify(images, self.config.patch_size)
        return self.encode(self.embed(patches), capture_layers, capture_attention)

    def patch_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """Drop the class token, if any."""
        return tokens[:, 1:] if self.cls_token is not None else tokens


def build_encoder(config: EncoderConfig, seed: Optional[int] = None) -> VisionTransformer:
    if seed is None:
        return VisionTransformer(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VisionTransformer(config)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def encoder_parameter_count(config: EncoderConfig) -> int:
    """Parameter count without allocating or initialising weights."""
    with torch.device("meta"):
        return count_parameters(VisionTransformer(config))


def to_tensor(x, dtype=torch.float32) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)
