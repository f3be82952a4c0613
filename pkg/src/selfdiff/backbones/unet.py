"""Width/depth-configurable UNet denoisers (classic and BigGAN-block variants).

``unet_ddpm`` is the classic residual UNet: additive time-embedding injection,
plain strided-conv down / nearest-neighbor up, attention at the configured
resolutions. ``unet_ddpmpp`` doubles the block count and moves resampling into
BigGAN-style residual blocks; skip connections are concatenated without
rescaling in both variants.

Feature taps are the decoder residual-block outputs, indexed out_1..out_N in
execution order (out_1 is the first, lowest-resolution decoder block).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import ConfigError
from ..taps import FeatureTap
from .common import BackboneSpec, ConditionEmbedding, TimeEmbedder

AUG_LABEL_DIM = 9


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(32, ch)


class ResBlock(nn.Module):
    """GN-SiLU-conv residual block with additive condition injection.

    resample: None, or "down"/"up" for BigGAN-style blocks that own their
    resampling (the shortcut is resampled and always passes a 1x1 conv).
    """

    def __init__(self, in_ch: int, out_ch: int, cond_dim: int, dropout: float,
                 resample: str | None = None):
        super().__init__()
        self.resample = resample
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.cond_proj = nn.Linear(cond_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        if in_ch != out_ch or resample is not None:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1)
        else:
            self.shortcut = nn.Identity()

    def _resample(self, x: Tensor) -> Tensor:
        if self.resample == "down":
            return F.avg_pool2d(x, 2)
        if self.resample == "up":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        return x

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = F.silu(self.norm1(x))
        h = self._resample(h)
        x = self._resample(x)
        h = self.conv1(h)
        h = h + self.cond_proj(F.silu(cond))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return self.shortcut(x) + h


class AttnBlock(nn.Module):
    def __init__(self, ch: int, heads: int = 1):
        super().__init__()
        if ch % heads != 0:
            raise ConfigError("channel count must be divisible by attention heads")
        self.heads = heads
        self.norm = _norm(ch)
        self.q = nn.Conv2d(ch, ch, 1)
        self.k = nn.Conv2d(ch, ch, 1)
        self.v = nn.Conv2d(ch, ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: Tensor) -> Tensor:
        b, c, hgt, wid = x.shape
        h = self.norm(x)
        q, k, v = self.q(h), self.k(h), self.v(h)
        dh = c // self.heads
        q = q.reshape(b, self.heads, dh, hgt * wid).transpose(2, 3)
        k = k.reshape(b, self.heads, dh, hgt * wid)
        v = v.reshape(b, self.heads, dh, hgt * wid).transpose(2, 3)
        attn = torch.softmax(q @ k / dh**0.5, dim=-1)
        out = (attn @ v).transpose(2, 3).reshape(b, c, hgt, wid)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x: Tensor, cond: Tensor | None = None) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    def __init__(self, spec: BackboneSpec, selfcond=None, use_aug_label: bool = False):
        super().__init__()
        if spec.family not in ("unet_ddpm", "unet_ddpmpp"):
            raise ConfigError(f"UNet cannot build family {spec.family!r}")
        self.spec = spec
        biggan = spec.family == "unet_ddpmpp"
        base = spec.base_channels
        cond_dim = 4 * base
        self.cond_dim = cond_dim
        self.time_embed = TimeEmbedder(base, cond_dim)
        self.class_embed = nn.Embedding(spec.num_classes + 1, cond_dim) if spec.num_classes else None
        self.aug_proj = None
        if use_aug_label:
            self.aug_proj = nn.Linear(AUG_LABEL_DIM, cond_dim)
            nn.init.zeros_(self.aug_proj.weight)
            nn.init.zeros_(self.aug_proj.bias)

        mults = spec.channel_multipliers
        n_blocks = spec.blocks_per_resolution
        chans = [base * m for m in mults]
        self.conv_in = nn.Conv2d(spec.in_channels, base, 3, padding=1)

        res = spec.image_size
        skip_chans = [base]
        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        in_ch = base
        self._enc_plan: list[tuple[int, bool]] = []  # (n blocks, attn?) per level
        for lvl, out_ch in enumerate(chans):
            use_attn = res in spec.attention_resolutions
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(n_blocks):
                blocks.append(ResBlock(in_ch, out_ch, cond_dim, spec.dropout))
                attns.append(AttnBlock(out_ch, spec.heads) if use_attn else nn.Identity())
                skip_chans.append(out_ch)
                in_ch = out_ch
            self.down_blocks.append(blocks)
            self.down_attns.append(attns)
            self._enc_plan.append((n_blocks, use_attn))
            if lvl != len(chans) - 1:
                if biggan:
                    self.downsamples.append(ResBlock(out_ch, out_ch, cond_dim, spec.dropout, resample="down"))
                else:
                    self.downsamples.append(Downsample(out_ch))
                skip_chans.append(out_ch)
                res //= 2
            else:
                self.downsamples.append(nn.Identity())

        mid_ch = chans[-1]
        self.mid_block1 = ResBlock(mid_ch, mid_ch, cond_dim, spec.dropout)
        self.mid_attn = AttnBlock(mid_ch, spec.heads)
        self.mid_block2 = ResBlock(mid_ch, mid_ch, cond_dim, spec.dropout)

        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        self.tap_channels: list[int] = []  # out_k -> channel width
        self._dec_resolutions: list[int] = []
        in_ch = mid_ch
        for lvl in reversed(range(len(chans))):
            out_ch = chans[lvl]
            use_attn = res in spec.attention_resolutions
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(n_blocks + 1):
                blocks.append(ResBlock(in_ch + skip_chans.pop(), out_ch, cond_dim, spec.dropout))
                attns.append(AttnBlock(out_ch, spec.heads) if use_attn else nn.Identity())
                self.tap_channels.append(out_ch)
                self._dec_resolutions.append(res)
                in_ch = out_ch
            self.up_blocks.append(blocks)
            self.up_attns.append(attns)
            if lvl != 0:
                if biggan:
                    self.upsamples.append(ResBlock(out_ch, out_ch, cond_dim, spec.dropout, resample="up"))
                else:
                    self.upsamples.append(Upsample(out_ch))
                res *= 2
            else:
                self.upsamples.append(nn.Identity())

        self.out_norm = _norm(base)
        self.out_conv = nn.Conv2d(base, spec.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        self.tap_indices = tuple(range(1, len(self.tap_channels) + 1))
        self.selfcond = selfcond if selfcond is not None and selfcond.enabled else None
        self.injector = None
        if self.selfcond is not None:
            if self.selfcond.mode not in ("adaptive", "additive"):
                raise ConfigError("UNet self-conditioning supports adaptive or additive injection")
            if self.selfcond.tap_layer not in self.tap_indices:
                raise ConfigError(f"tap layer {self.selfcond.tap_layer} not in 1..{len(self.tap_indices)}")
            from ..selfcond import FeatureInjector

            self.injector = FeatureInjector(
                tap_width=self.tap_channels[self.selfcond.tap_layer - 1],
                cond_width=cond_dim,
                mode=self.selfcond.mode,
                init_policy=self.selfcond.init_policy,
            )

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return (self.spec.in_channels, self.spec.image_size, self.spec.image_size)

    def tap_shape(self, index: int) -> tuple[int, int, int]:
        ch = self.tap_channels[index - 1]
        res = self._dec_resolutions[index - 1]
        return (ch, res, res)

    def _condition(self, t_cond: Tensor, class_label, aug_label) -> tuple[ConditionEmbedding, Tensor]:
        temb = self.time_embed(t_cond)
        e = ConditionEmbedding(vector=temb)
        if self.class_embed is not None:
            if class_label is None:
                class_label = torch.full((temb.shape[0],), self.spec.num_classes,
                                         dtype=torch.long, device=temb.device)
            e = e.add(self.class_embed(class_label), "class")
        if self.aug_proj is not None:
            if aug_label is None:  # non-leaky contract: absent label means the zero label
                aug_label = torch.zeros(temb.shape[0], AUG_LABEL_DIM, device=temb.device)
            e = e.add(self.aug_proj(aug_label.to(temb.dtype)), "augmentation")
        return e, temb

    def forward(self, x: Tensor, t_cond: Tensor, class_label=None, aug_label=None, taps=()):
        taps = tuple(taps)
        unknown = [k for k in taps if k not in self.tap_indices]
        if unknown:
            raise ConfigError(f"unknown tap indices {unknown}; declared 1..{len(self.tap_indices)}")
        e, temb = self._condition(t_cond, class_label, aug_label)
        cond = e.vector

        h = self.conv_in(x)
        hs = [h]
        for lvl, (blocks, attns) in enumerate(zip(self.down_blocks, self.down_attns)):
            for block, attn in zip(blocks, attns):
                h = attn(block(h, cond))
                hs.append(h)
            down = self.downsamples[lvl]
            if not isinstance(down, nn.Identity):
                h = down(h, cond) if isinstance(down, ResBlock) else down(h)
                hs.append(h)

        h = self.mid_block1(h, cond)
        h = self.mid_attn(h)
        h = self.mid_block2(h, cond)

        collected: dict[int, FeatureTap] = {}
        out_idx = 0
        for lvl, (blocks, attns) in enumerate(zip(self.up_blocks, self.up_attns)):
            for block, attn in zip(blocks, attns):
                h = block(torch.cat([h, hs.pop()], dim=1), cond)
                out_idx += 1
                if out_idx in taps:
                    # live tensor: read-only by convention, differentiable for distillation
                    collected[out_idx] = FeatureTap(layer_index=out_idx, tensor=h, timestep=t_cond)
                if self.injector is not None and out_idx == self.selfcond.tap_layer:
                    from ..selfcond import pool_feature

                    e = self.injector(e, pool_feature(h), temb)
                    cond = e.vector
                h = attn(h)
            up = self.upsamples[lvl]
            if not isinstance(up, nn.Identity):
                h = up(h, cond) if isinstance(up, ResBlock) else up(h)

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out, collected
