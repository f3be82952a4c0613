"""Shared backbone building blocks: specs, time embeddings, adaptive norms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import ConfigError, ShapeError

FAMILIES = ("unet_ddpm", "unet_ddpmpp", "uvit", "dit", "planted_mlp")


@dataclass
class BackboneSpec:
    """Architecture description for any denoiser family.

    UNet families read base_channels / channel_multipliers / blocks_per_resolution;
    ViT families read hidden_size / depth / heads / patch_size. ``planted_mlp``
    is a tiny test-harness family whose taps are fixed input projections.
    """

    family: str = "dit"
    image_size: int = 32
    in_channels: int = 3
    num_classes: int = 0  # 0 = unconditional; conditional models get a null row for CFG
    dropout: float = 0.0
    # unet fields
    base_channels: int = 128
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 2)
    blocks_per_resolution: int = 2
    attention_resolutions: tuple[int, ...] = (16,)
    # vit fields
    hidden_size: int = 512
    depth: int = 12
    heads: int = 8
    patch_size: int = 2
    # planted_mlp fields
    planted_layer: int = 0
    tap_width: int = 8

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown backbone family {self.family!r}")
        if not (0 <= self.dropout < 1):
            raise ConfigError("dropout must lie in [0, 1)")
        if self.family in ("uvit", "dit") and self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")


def sinusoidal_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """Raw sinusoidal embedding, [sin | cos] halves; t=0 maps to (0..0, 1..1)."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal embedding dim must be even, got {dim}")
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t[None]
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeEmbedder(nn.Module):
    """Sinusoidal embedding followed by the standard 2-layer projection."""

    def __init__(self, freq_dim: int, out_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(sinusoidal_embedding(t, self.freq_dim).to(self.mlp[0].weight.dtype))


def adaptive_norm(x: Tensor, scale: Tensor, shift: Tensor, kind: str = "layer",
                  num_groups: int = 32) -> Tensor:
    """normalize(x) * (1 + scale) + shift with affine-free group or layer norm."""
    if kind == "layer":
        width = x.shape[-1]
        if scale.shape[-1] != width or shift.shape[-1] != width:
            raise ShapeError(f"scale/shift width must be {width}")
        h = F.layer_norm(x, (width,))
        if scale.ndim == 2 and x.ndim == 3:  # per-sample modulation of token stacks
            scale = scale[:, None, :]
            shift = shift[:, None, :]
        return h * (1.0 + scale) + shift
    if kind == "group":
        width = x.shape[1]
        if scale.shape[-1] != width or shift.shape[-1] != width:
            raise ShapeError(f"scale/shift width must be {width}")
        h = F.group_norm(x, min(num_groups, width))
        spatial = [1] * (x.ndim - 2)
        scale = scale.reshape(-1, width, *spatial)  # (C,) or (B, C) -> broadcastable
        shift = shift.reshape(-1, width, *spatial)
        return h * (1.0 + scale) + shift
    raise ConfigError(f"unknown adaptive norm kind {kind!r}")


@dataclass
class ConditionEmbedding:
    """Condition vector plus provenance flags for what was fused into it."""

    vector: Tensor
    sources: frozenset[str] = frozenset({"time"})

    def add(self, delta: Tensor, source: str) -> "ConditionEmbedding":
        return ConditionEmbedding(vector=self.vector + delta, sources=self.sources | {source})


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def param_count(spec: BackboneSpec, **build_kwargs) -> int:
    """Exact trainable-parameter total; instantiates on the meta device."""
    from . import build_backbone

    with torch.device("meta"):
        model = build_backbone(spec, **build_kwargs)
    return count_parameters(model)


# Published configurations used for parameter-parity checks. UNet/UViT sizes
# are the 32x32 pixel models; DiT sizes are the 16x16x32 latent models with
# 1000-class conditioning.
PAPER_CONFIGS: dict[str, BackboneSpec] = {
    "unet_ddpm_32": BackboneSpec(
        family="unet_ddpm", image_size=32, in_channels=3, base_channels=128,
        channel_multipliers=(1, 2, 2, 2), blocks_per_resolution=2,
        attention_resolutions=(16,), heads=1, dropout=0.1,
    ),
    "unet_ddpmpp_32": BackboneSpec(
        family="unet_ddpmpp", image_size=32, in_channels=3, base_channels=128,
        channel_multipliers=(2, 2, 2), blocks_per_resolution=4,
        attention_resolutions=(16,), heads=1, dropout=0.1,
    ),
    "uvit_s_32": BackboneSpec(
        family="uvit", image_size=32, in_channels=3, hidden_size=512, depth=13,
        heads=8, patch_size=2,
    ),
    "dit_b_16": BackboneSpec(
        family="dit", image_size=16, in_channels=32, hidden_size=768, depth=12,
        heads=12, patch_size=1, num_classes=1000,
    ),
    "dit_l_16": BackboneSpec(
        family="dit", image_size=16, in_channels=32, hidden_size=1024, depth=24,
        heads=16, patch_size=1, num_classes=1000,
    ),
    "dit_xl_16": BackboneSpec(
        family="dit", image_size=16, in_channels=32, hidden_size=1152, depth=28,
        heads=16, patch_size=1, num_classes=1000,
    ),
}

PAPER_PARAM_COUNTS = {
    "unet_ddpm_32": 35.7e6,
    "unet_ddpmpp_32": 56.5e6,
    "uvit_s_32": 44.3e6,
    "dit_b_16": 130e6,
    "dit_l_16": 457e6,
    "dit_xl_16": 675e6,
}
