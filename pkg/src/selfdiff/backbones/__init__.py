"""Denoiser backbones with per-layer feature taps and a shared conditioning pathway."""

from __future__ import annotations

from torch import nn

from ..errors import ConfigError
from ..taps import FeatureTap, TokenLayout
from .common import (
    PAPER_CONFIGS,
    PAPER_PARAM_COUNTS,
    BackboneSpec,
    ConditionEmbedding,
    TimeEmbedder,
    adaptive_norm,
    count_parameters,
    param_count,
    sinusoidal_embedding,
)


def build_backbone(spec: BackboneSpec, selfcond=None, use_aug_label: bool = False) -> nn.Module:
    """Instantiate the family named by the spec.

    ``use_aug_label`` wires the 9-dim augmentation-label conditioning in
    (embedding pathway for UNet/DiT/planted, an extra token for UViT).
    """
    if spec.family in ("unet_ddpm", "unet_ddpmpp"):
        from .unet import UNet

        return UNet(spec, selfcond=selfcond, use_aug_label=use_aug_label)
    if spec.family == "uvit":
        from .vit import UViT

        return UViT(spec, selfcond=selfcond, use_aug_token=use_aug_label)
    if spec.family == "dit":
        from .vit import DiT

        return DiT(spec, selfcond=selfcond, use_aug_label=use_aug_label)
    if spec.family == "planted_mlp":
        from .toys import PlantedMLP

        return PlantedMLP(spec, selfcond=selfcond, use_aug_label=use_aug_label)
    raise ConfigError(f"unknown backbone family {spec.family!r}")


__all__ = [
    "BackboneSpec",
    "ConditionEmbedding",
    "FeatureTap",
    "TokenLayout",
    "TimeEmbedder",
    "PAPER_CONFIGS",
    "PAPER_PARAM_COUNTS",
    "adaptive_norm",
    "build_backbone",
    "count_parameters",
    "param_count",
    "sinusoidal_embedding",
]
