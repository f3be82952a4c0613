"""Feature-tap containers shared by backbones, self-conditioning, and probing."""

from __future__ import annotations

from dataclasses import dataclass

from torch import Tensor


@dataclass(frozen=True)
class TokenLayout:
    """Positions of special tokens in a token sequence [cls?, aug?, time, class?, patches...]."""

    has_cls: bool = False
    has_aug: bool = False
    has_class: bool = False
    n_patches: int = 0

    @property
    def cls_index(self) -> int | None:
        return 0 if self.has_cls else None

    @property
    def aug_index(self) -> int | None:
        if not self.has_aug:
            return None
        return 1 if self.has_cls else 0

    @property
    def n_special(self) -> int:
        return int(self.has_cls) + int(self.has_aug) + 1 + int(self.has_class)

    @property
    def n_tokens(self) -> int:
        return self.n_special + self.n_patches

    @property
    def patch_slice(self) -> slice:
        return slice(self.n_special, None)


@dataclass
class FeatureTap:
    """A read-only copy of one layer's features.

    ``tensor`` is (B, C, H, W) for convolutional backbones or (B, N, D) for
    token backbones; ``token_layout`` marks special-token rows in the latter.
    """

    layer_index: int
    tensor: Tensor
    timestep: float | Tensor | None = None
    token_layout: TokenLayout | None = None
