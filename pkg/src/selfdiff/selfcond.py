"""Self-conditioning: pooled-feature injection, summary tokens, layer profiling.

The mechanism reroutes an intermediate feature of the denoiser back into its
own conditioning pathway so that decoding layers receive concentrated global
context. Adaptive-norm backbones (UNet, DiT) pool the tapped layer and add a
projected, time-scaled vector to the condition embedding; the token backbone
(UViT) carries a learnable summary token instead.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .backbones.common import ConditionEmbedding
from .errors import ConfigError, ShapeError
from .taps import FeatureTap

MODES = ("adaptive", "additive", "cls_token", "off")
INIT_POLICIES = ("zero_scale", "standard")


@dataclass
class SelfCondConfig:
    tap_layer: int = 0  # 1-based index into the backbone's declared taps; 0 = unset
    mode: str = "off"
    init_policy: str = "zero_scale"
    mask_cls_aug: bool = True

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown self-conditioning mode {self.mode!r}")
        if self.init_policy not in INIT_POLICIES:
            raise ConfigError(f"unknown init policy {self.init_policy!r}")
        if self.mode != "off" and self.tap_layer < 1:
            raise ConfigError("tap_layer must be a positive layer index")

    @property
    def enabled(self) -> bool:
        return self.mode != "off"


def pool_feature(tap: FeatureTap | Tensor) -> Tensor:
    """Global average over positions: (B,C,H,W) -> (B,C) or (B,N,D) -> (B,D).

    Token stacks are pooled over patch tokens only; special tokens carry
    conditioning, not content.
    """
    if isinstance(tap, FeatureTap):
        x = tap.tensor
        if x.ndim == 3 and tap.token_layout is not None:
            x = x[:, tap.token_layout.patch_slice]
    else:
        x = tap
    if x.ndim == 4:
        if x.shape[2] * x.shape[3] == 0:
            raise ShapeError("cannot pool an empty feature map")
        return x.mean(dim=(2, 3))
    if x.ndim == 3:
        if x.shape[1] == 0:
            raise ShapeError("cannot pool an empty token stack")
        return x.mean(dim=1)
    if x.ndim == 2:
        return x
    raise ShapeError(f"unsupported tap rank {x.ndim}")


class FeatureInjector(nn.Module):
    """Adds a projected pooled feature to the condition embedding.

    adaptive: e' = e + s(temb) * (W @ pooled), s a learned linear map of the
    time embedding; additive: e' = e + W @ pooled. Under the zero_scale policy
    the injection starts as an exact no-op (s, or W for additive, is
    zero-initialized), so the conditioned model is a strict superset of its
    baseline at initialization.
    """

    def __init__(self, tap_width: int, cond_width: int, mode: str = "adaptive",
                 init_policy: str = "zero_scale"):
        super().__init__()
        if mode not in ("adaptive", "additive"):
            raise ConfigError(f"injector mode must be adaptive or additive, got {mode!r}")
        self.mode = mode
        self.proj = nn.Linear(tap_width, cond_width, bias=False)
        if mode == "adaptive":
            self.scale_map = nn.Linear(cond_width, cond_width)
            if init_policy == "zero_scale":
                nn.init.zeros_(self.scale_map.weight)
                nn.init.zeros_(self.scale_map.bias)
        elif init_policy == "zero_scale":
            nn.init.zeros_(self.proj.weight)

    def forward(self, e: ConditionEmbedding, pooled: Tensor, temb: Tensor) -> ConditionEmbedding:
        delta = self.proj(pooled)
        if self.mode == "adaptive":
            delta = self.scale_map(temb) * delta
        return e.add(delta, "self_cond")


def inject(e: ConditionEmbedding, pooled: Tensor, temb: Tensor, mode: str,
           params: FeatureInjector | None) -> ConditionEmbedding:
    """Functional form of the injection; mode='off' returns e unchanged."""
    if mode == "off":
        return e
    if params is None or params.mode != mode:
        raise ConfigError("injection parameters missing or built for a different mode")
    return params(e, pooled, temb)


def build_attention_mask(has_cls: bool, has_aug: bool, n_tokens: int) -> Tensor:
    """Boolean (n, n) matrix, True = attention allowed.

    Everything attends to everything, except the summary token and the
    augmentation-label token are mutually blocked when both are present
    (their direct interaction harms the bottleneck).
    """
    mask = torch.ones(n_tokens, n_tokens, dtype=torch.bool)
    if has_cls and has_aug:
        mask[0, 1] = False
        mask[1, 0] = False
    return mask


def attach_summary_token(tokens: Tensor, cls_state: Tensor) -> Tensor:
    """Prepend the learnable summary token to a (B, N, D) token stack."""
    if tokens.ndim != 3:
        raise ConfigError("summary tokens only apply to token backbones")
    if cls_state.ndim == 1:
        cls_state = cls_state[None, None, :].expand(tokens.shape[0], 1, -1)
    elif cls_state.ndim == 2:
        cls_state = cls_state[:, None, :]
    return torch.cat([cls_state.to(tokens.dtype), tokens], dim=1)


@dataclass
class LayerProfile:
    """Ranking report from short profiling runs, ascending by loss."""

    entries: list[tuple[int, float]]  # (layer, mean final-epoch loss), ranked
    failed: list[int] = field(default_factory=list)
    short_epochs: int = 0
    seeds: tuple[int, ...] = ()

    @property
    def best_layer(self) -> int:
        return self.entries[0][0]

    def to_dict(self) -> dict:
        return {
            "ranking": [{"layer": l, "mean_loss": v} for l, v in self.entries],
            "failed": self.failed,
            "short_epochs": self.short_epochs,
            "seeds": list(self.seeds),
        }


def rank_candidates(losses: dict[int, float]) -> LayerProfile:
    """Order candidates ascending by loss; ties break toward lower layer index."""
    good = {l: v for l, v in losses.items() if math.isfinite(v)}
    failed = sorted(l for l, v in losses.items() if not math.isfinite(v))
    for layer in failed:
        warnings.warn(f"profiling run for layer {layer} diverged; excluded from ranking")
    entries = sorted(good.items(), key=lambda kv: (kv[1], kv[0]))
    return LayerProfile(entries=entries, failed=failed)


def profile_layers(base_config, candidate_layers, short_epochs: int, seeds) -> LayerProfile:
    """Short, parallel-in-spirit training runs per candidate tap layer.

    Every candidate sees the identical data and seed schedule; candidates are
    ranked by mean training loss over the final epoch, averaged across seeds.
    """
    from dataclasses import replace

    from .training import final_epoch_loss, train

    candidate_layers = list(candidate_layers)
    if not candidate_layers:
        raise ConfigError("no candidate layers given")
    losses: dict[int, float] = {}
    for layer in candidate_layers:
        per_seed = []
        for seed in seeds:
            cfg = replace(
                base_config,
                seed=int(seed),
                epochs=short_epochs,
                selfcond=replace(base_config.selfcond, tap_layer=int(layer),
                                 mode=base_config.selfcond.mode if base_config.selfcond.enabled else "adaptive"),
            )
            result = train(cfg)
            per_seed.append(final_epoch_loss(result.metrics, cfg))
        mean = sum(per_seed) / len(per_seed)
        losses[int(layer)] = mean if all(math.isfinite(v) for v in per_seed) else float("nan")
    profile = rank_candidates(losses)
    profile.short_epochs = short_epochs
    profile.seeds = tuple(int(s) for s in seeds)
    return profile
