"""Token-based denoisers: UViT (all-as-tokens) and DiT (adaLN conditioning).

UViT carries time (and optional class / augmentation-label / summary) tokens
in the sequence itself; DiT fuses conditions into a vector consumed by
adaLN-zero blocks. Both expose per-block token taps.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import ConfigError, ShapeError
from ..selfcond import build_attention_mask
from ..taps import FeatureTap, TokenLayout
from .common import BackboneSpec, ConditionEmbedding, TimeEmbedder, adaptive_norm, sinusoidal_embedding

AUG_LABEL_DIM = 9


class TokenAttention(nn.Module):
    """Multi-head self-attention with boolean masks and optional gated column.

    ``gate``/``gate_col`` implement zero-initialized inclusion of one token
    (the summary token) into everyone else's output: other tokens' rows use a
    softmax that excludes that column, plus ``gate`` times the attention weight
    the column would receive under the full softmax. At gate=0 the layer is
    exactly the model without that token's outbound influence.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0, qkv_bias: bool = True):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError("hidden size must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, mask: Tensor | None = None, gate: Tensor | None = None,
                gate_col: int | None = None, record: list | None = None) -> Tensor:
        b, n, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(dh)
        neg_inf = torch.finfo(logits.dtype).min
        if mask is not None:
            logits = logits.masked_fill(~mask, neg_inf)
        if gate is None or gate_col is None:
            attn = torch.softmax(logits, dim=-1)
            if record is not None:
                record.append(attn)
            out = attn @ v
        else:
            c = gate_col
            full = torch.softmax(logits, dim=-1)
            base_logits = logits.clone()
            base_logits[..., :, c] = neg_inf
            base = torch.softmax(base_logits, dim=-1)
            out = base @ v + gate * full[..., :, c : c + 1] * v[..., c : c + 1, :]
            out[..., c, :] = (full @ v)[..., c, :]
            if record is not None:
                eff = base.clone()
                eff[..., :, c] = gate * full[..., :, c]
                eff[..., c, :] = full[..., c, :]
                record.append(eff)
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.dropout(self.proj(out))


class TokenBlock(nn.Module):
    """Pre-norm transformer block, optionally with a UViT skip projection."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0, skip: bool = False,
                 gelu_tanh: bool = False):
        super().__init__()
        self.skip_linear = nn.Linear(2 * dim, dim) if skip else None
        self.norm1 = nn.LayerNorm(dim)
        self.attn = TokenAttention(dim, heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        act = nn.GELU(approximate="tanh") if gelu_tanh else nn.GELU()
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), act, nn.Linear(4 * dim, dim), nn.Dropout(dropout)
        )

    def forward(self, x: Tensor, skip: Tensor | None = None, mask: Tensor | None = None,
                gate: Tensor | None = None, gate_col: int | None = None,
                record: list | None = None) -> Tensor:
        if self.skip_linear is not None:
            x = self.skip_linear(torch.cat([x, skip], dim=-1))
        x = x + self.attn(self.norm1(x), mask=mask, gate=gate, gate_col=gate_col, record=record)
        x = x + self.mlp(self.norm2(x))
        return x


def _patchify(x: Tensor, patch: int) -> Tensor:
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


def _unpatchify(x: Tensor, patch: int, channels: int, image_size: int) -> Tensor:
    b, n, _ = x.shape
    side = image_size // patch
    if side * side != n:
        raise ShapeError(f"token count {n} does not form a {side}x{side} grid")
    x = x.reshape(b, side, side, channels, patch, patch)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, image_size, image_size)


class UViT(nn.Module):
    """All-as-tokens denoiser; depth = enc + 1 mid + dec with skip projections.

    Token order: [summary?, aug?, time, class?, patches]. The summary token is
    a single learnable vector (exactly one token's parameters); under the
    zero_scale policy its outbound attention goes through per-block
    zero-initialized gates, making the conditioned model output-identical to
    the baseline at initialization.
    """

    def __init__(self, spec: BackboneSpec, selfcond=None, use_aug_token: bool = False):
        super().__init__()
        if spec.family != "uvit":
            raise ConfigError(f"UViT cannot build family {spec.family!r}")
        if spec.depth % 2 == 0:
            raise ConfigError("uvit depth must be odd (encoder + mid + decoder)")
        self.spec = spec
        dim = spec.hidden_size
        self.n_patches = (spec.image_size // spec.patch_size) ** 2

        self.selfcond = selfcond if selfcond is not None and selfcond.enabled else None
        if self.selfcond is not None and self.selfcond.mode != "cls_token":
            raise ConfigError("UViT self-conditioning uses the summary-token mode")
        self.with_cls = self.selfcond is not None
        self.gated_cls = self.with_cls and self.selfcond.init_policy == "zero_scale"
        self.mask_cls_aug = self.selfcond.mask_cls_aug if self.selfcond is not None else True
        self.with_aug = use_aug_token

        self.patch_embed = nn.Conv2d(spec.in_channels, dim, spec.patch_size, stride=spec.patch_size)
        n_pos = 1 + (1 if spec.num_classes else 0) + self.n_patches
        self.pos_embed = nn.Parameter(torch.zeros(1, n_pos, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.class_embed = nn.Embedding(spec.num_classes + 1, dim) if spec.num_classes else None
        self.aug_proj = None
        if use_aug_token:
            self.aug_proj = nn.Linear(AUG_LABEL_DIM, dim)
            nn.init.zeros_(self.aug_proj.weight)
            nn.init.zeros_(self.aug_proj.bias)
        if self.with_cls:
            self.cls_token = nn.Parameter(torch.empty(dim))
            nn.init.trunc_normal_(self.cls_token, std=0.02)
        if self.gated_cls:
            self.cls_gates = nn.Parameter(torch.zeros(spec.depth))

        half = spec.depth // 2
        self.blocks = nn.ModuleList(
            [TokenBlock(dim, spec.heads, spec.dropout, skip=(i > half)) for i in range(spec.depth)]
        )
        self.norm_out = nn.LayerNorm(dim)
        self.pred = nn.Linear(dim, spec.patch_size**2 * spec.in_channels)
        self.final_conv = nn.Conv2d(spec.in_channels, spec.in_channels, 3, padding=1)
        self.tap_indices = tuple(range(1, spec.depth + 1))
        if self.selfcond is not None and self.selfcond.tap_layer not in self.tap_indices:
            raise ConfigError(f"tap layer {self.selfcond.tap_layer} not in 1..{spec.depth}")

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return (self.spec.in_channels, self.spec.image_size, self.spec.image_size)

    def token_layout(self) -> TokenLayout:
        return TokenLayout(
            has_cls=self.with_cls, has_aug=self.with_aug,
            has_class=self.class_embed is not None, n_patches=self.n_patches,
        )

    def forward(self, x: Tensor, t_cond: Tensor, class_label=None, aug_label=None,
                taps=(), record_attention: list | None = None):
        taps = tuple(taps)
        unknown = [k for k in taps if k not in self.tap_indices]
        if unknown:
            raise ConfigError(f"unknown tap indices {unknown}; declared 1..{self.spec.depth}")
        layout = self.token_layout()
        b = x.shape[0]
        dim = self.spec.hidden_size

        patches = self.patch_embed(x).flatten(2).transpose(1, 2)
        time_token = sinusoidal_embedding(t_cond, dim).to(patches.dtype)[:, None, :]
        rows = [time_token]
        if self.class_embed is not None:
            if class_label is None:
                class_label = torch.full((b,), self.spec.num_classes, dtype=torch.long, device=x.device)
            rows.append(self.class_embed(class_label)[:, None, :])
        rows.append(patches)
        tokens = torch.cat(rows, dim=1) + self.pos_embed
        if self.with_aug:
            if aug_label is None:
                aug_label = torch.zeros(b, AUG_LABEL_DIM, device=x.device)
            tokens = torch.cat([self.aug_proj(aug_label.to(tokens.dtype))[:, None, :], tokens], dim=1)
        if self.with_cls:
            tokens = torch.cat([self.cls_token[None, None, :].expand(b, 1, dim), tokens], dim=1)

        mask = None
        if self.with_cls and self.with_aug and self.mask_cls_aug:
            mask = build_attention_mask(True, True, layout.n_tokens).to(x.device)

        collected: dict[int, FeatureTap] = {}
        skips: list[Tensor] = []
        half = self.spec.depth // 2
        h = tokens
        for i, block in enumerate(self.blocks):
            kwargs = dict(mask=mask, record=record_attention)
            if self.gated_cls:
                kwargs.update(gate=self.cls_gates[i], gate_col=layout.cls_index)
            if i > half:
                h = block(h, skip=skips.pop(), **kwargs)
            else:
                h = block(h, **kwargs)
            if i < half:
                skips.append(h)
            idx = i + 1
            if idx in taps:
                collected[idx] = FeatureTap(layer_index=idx, tensor=h, timestep=t_cond,
                                            token_layout=layout)

        h = self.norm_out(h)
        out_tokens = self.pred(h[:, layout.patch_slice])
        img = _unpatchify(out_tokens, self.spec.patch_size, self.spec.in_channels, self.spec.image_size)
        return self.final_conv(img), collected

    def summary_state(self, tap: FeatureTap) -> Tensor:
        if not self.with_cls:
            raise ConfigError("model has no summary token")
        return tap.tensor[:, tap.token_layout.cls_index]


class DiTBlock(nn.Module):
    """Transformer block whose norm scale/shift/gates come from the condition."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.attn = TokenAttention(dim, heads, dropout)
        act = nn.GELU(approximate="tanh")
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), act, nn.Linear(4 * dim, dim))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.ada[-1].weight)
        nn.init.zeros_(self.ada[-1].bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        s1, b1, g1, s2, b2, g2 = self.ada(cond).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attn(adaptive_norm(x, s1, b1, kind="layer"))
        x = x + g2[:, None] * self.mlp(adaptive_norm(x, s2, b2, kind="layer"))
        return x


class DiTFinal(nn.Module):
    def __init__(self, dim: int, patch: int, out_channels: int):
        super().__init__()
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))
        self.linear = nn.Linear(dim, patch * patch * out_channels)
        nn.init.zeros_(self.ada[-1].weight)
        nn.init.zeros_(self.ada[-1].bias)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        shift, scale = self.ada(cond).chunk(2, dim=-1)
        return self.linear(adaptive_norm(x, scale, shift, kind="layer"))


def sincos_pos_embed_2d(dim: int, side: int) -> Tensor:
    """Fixed 2-D sine-cosine positional table, (side*side, dim)."""
    if dim % 4 != 0:
        raise ConfigError("2d sincos embedding needs dim divisible by 4")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float32) / quarter))
    coords = torch.arange(side, dtype=torch.float32)
    gy, gx = torch.meshgrid(coords, coords, indexing="ij")
    out = []
    for grid in (gy, gx):
        args = grid.reshape(-1)[:, None] * omega[None]
        out.extend([torch.sin(args), torch.cos(args)])
    return torch.cat(out, dim=-1)


class DiT(nn.Module):
    """Patch-token denoiser conditioned through adaLN-zero blocks."""

    def __init__(self, spec: BackboneSpec, selfcond=None, use_aug_label: bool = False):
        super().__init__()
        if spec.family != "dit":
            raise ConfigError(f"DiT cannot build family {spec.family!r}")
        self.spec = spec
        dim = spec.hidden_size
        side = spec.image_size // spec.patch_size
        self.n_patches = side * side
        self.patch_embed = nn.Conv2d(spec.in_channels, dim, spec.patch_size, stride=spec.patch_size)
        self.register_buffer("pos_embed", sincos_pos_embed_2d(dim, side)[None], persistent=False)
        self.time_embed = TimeEmbedder(256, dim)
        self.class_embed = nn.Embedding(spec.num_classes + 1, dim) if spec.num_classes else None
        self.aug_proj = None
        if use_aug_label:
            self.aug_proj = nn.Linear(AUG_LABEL_DIM, dim)
            nn.init.zeros_(self.aug_proj.weight)
            nn.init.zeros_(self.aug_proj.bias)
        self.blocks = nn.ModuleList([DiTBlock(dim, spec.heads, spec.dropout) for _ in range(spec.depth)])
        self.final = DiTFinal(dim, spec.patch_size, spec.in_channels)
        self.tap_indices = tuple(range(1, spec.depth + 1))

        self.selfcond = selfcond if selfcond is not None and selfcond.enabled else None
        self.injector = None
        if self.selfcond is not None:
            if self.selfcond.mode not in ("adaptive", "additive"):
                raise ConfigError("DiT self-conditioning supports adaptive or additive injection")
            if self.selfcond.tap_layer not in self.tap_indices:
                raise ConfigError(f"tap layer {self.selfcond.tap_layer} not in 1..{spec.depth}")
            from ..selfcond import FeatureInjector

            self.injector = FeatureInjector(
                tap_width=dim, cond_width=dim, mode=self.selfcond.mode,
                init_policy=self.selfcond.init_policy,
            )

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return (self.spec.in_channels, self.spec.image_size, self.spec.image_size)

    def token_layout(self) -> TokenLayout:
        return TokenLayout(n_patches=self.n_patches)

    def forward(self, x: Tensor, t_cond: Tensor, class_label=None, aug_label=None, taps=()):
        taps = tuple(taps)
        unknown = [k for k in taps if k not in self.tap_indices]
        if unknown:
            raise ConfigError(f"unknown tap indices {unknown}; declared 1..{self.spec.depth}")
        temb = self.time_embed(t_cond)
        e = ConditionEmbedding(vector=temb)
        if self.class_embed is not None:
            if class_label is None:
                class_label = torch.full((x.shape[0],), self.spec.num_classes,
                                         dtype=torch.long, device=x.device)
            e = e.add(self.class_embed(class_label), "class")
        if self.aug_proj is not None:
            if aug_label is None:  # non-leaky contract: absent label means the zero label
                aug_label = torch.zeros(x.shape[0], AUG_LABEL_DIM, device=x.device)
            e = e.add(self.aug_proj(aug_label.to(temb.dtype)), "augmentation")
        cond = e.vector

        h = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed.to(x.dtype)
        layout = self.token_layout()
        collected: dict[int, FeatureTap] = {}
        for i, block in enumerate(self.blocks):
            h = block(h, cond)
            idx = i + 1
            if idx in taps:
                collected[idx] = FeatureTap(layer_index=idx, tensor=h, timestep=t_cond,
                                            token_layout=layout)
            if self.injector is not None and idx == self.selfcond.tap_layer:
                e = self.injector(e, h.mean(dim=1), temb)
                cond = e.vector
        out = self.final(h, cond)
        return _unpatchify(out, self.spec.patch_size, self.spec.in_channels, self.spec.image_size), collected
