"""Tiny MLP denoiser with fixed input-projection taps for profiler tests.

Each declared tap k projects the flattened noisy input through a frozen matrix
P_k. When a planted direction is set, P at ``planted_layer`` exposes that
direction (e.g. the class-separating axis of a dataset) while every other tap
is projected orthogonal to it, so exactly one tap carries usable global signal
for self-conditioning.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import ConfigError
from ..taps import FeatureTap
from .common import BackboneSpec, ConditionEmbedding, TimeEmbedder


class PlantedMLP(nn.Module):
    def __init__(self, spec: BackboneSpec, selfcond=None, use_aug_label: bool = False):
        super().__init__()
        if spec.family != "planted_mlp":
            raise ConfigError(f"PlantedMLP cannot build family {spec.family!r}")
        self.spec = spec
        d = spec.in_channels * spec.image_size**2
        hidden = spec.hidden_size
        self.d = d
        self.time_embed = TimeEmbedder(64, hidden)
        self.lin_in = nn.Linear(d, hidden)
        self.cond1 = nn.Linear(hidden, hidden)
        self.lin_mid = nn.Linear(hidden, hidden)
        self.cond2 = nn.Linear(hidden, hidden)
        self.lin_out = nn.Linear(hidden, d)
        self.tap_indices = tuple(range(1, spec.depth + 1))
        g = torch.Generator().manual_seed(20_240_817)
        proj = torch.randn(spec.depth, spec.tap_width, d, generator=g) / d**0.5
        self.register_buffer("tap_proj", proj)

        self.selfcond = selfcond if selfcond is not None and selfcond.enabled else None
        self.injector = None
        if self.selfcond is not None:
            if self.selfcond.mode not in ("adaptive", "additive"):
                raise ConfigError("planted_mlp supports adaptive or additive injection")
            if self.selfcond.tap_layer not in self.tap_indices:
                raise ConfigError(f"tap layer {self.selfcond.tap_layer} not in 1..{spec.depth}")
            from ..selfcond import FeatureInjector

            self.injector = FeatureInjector(
                tap_width=spec.tap_width, cond_width=hidden,
                mode=self.selfcond.mode, init_policy=self.selfcond.init_policy,
            )

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return (self.spec.in_channels, self.spec.image_size, self.spec.image_size)

    def set_planted_direction(self, direction: Tensor) -> None:
        """Align the planted tap with ``direction``; make all other taps blind to it."""
        if self.spec.planted_layer not in self.tap_indices:
            raise ConfigError("spec.planted_layer must name a declared tap")
        u = direction.reshape(-1)
        if u.numel() != self.d:
            raise ConfigError(f"direction must have {self.d} elements")
        u = u / u.norm().clamp_min(1e-12)
        proj = self.tap_proj.clone()
        # remove the signal direction everywhere, then re-plant it in one tap
        coeff = proj @ u  # (depth, tap_width)
        proj = proj - coeff[..., None] * u[None, None, :]
        k = self.spec.planted_layer - 1
        proj[k] = proj[k] + u[None, :].expand(self.spec.tap_width, -1)
        self.tap_proj.copy_(proj)

    def forward(self, x: Tensor, t_cond: Tensor, class_label=None, aug_label=None, taps=()):
        taps = tuple(taps)
        unknown = [k for k in taps if k not in self.tap_indices]
        if unknown:
            raise ConfigError(f"unknown tap indices {unknown}; declared 1..{self.spec.depth}")
        flat = x.reshape(x.shape[0], -1)
        temb = self.time_embed(t_cond)
        e = ConditionEmbedding(vector=temb)
        feats = {k: flat @ self.tap_proj[k - 1].T for k in self.tap_indices}
        collected = {
            k: FeatureTap(layer_index=k, tensor=feats[k], timestep=t_cond) for k in taps
        }
        if self.injector is not None:
            e = self.injector(e, feats[self.selfcond.tap_layer], temb)
        h = F.silu(self.lin_in(flat) + self.cond1(e.vector))
        h = F.silu(self.lin_mid(h) + self.cond2(e.vector))
        return self.lin_out(h).reshape(x.shape), collected
