"""Non-leaky geometric augmentation with a 9-dim conditioning label.

Each draw composes up to six transforms (flip, quarter rotation, translation,
isotropic scale, continuous rotation, anisotropic stretch), applied with
independent probabilities, and encodes the drawn parameters losslessly into a
9-vector supplied to the model as conditioning. The zero label always means
the identity transform, and sampling-time code paths only ever see the zero
label, so augmentation cannot leak into generation.

Label slots:
  0 flip_x            {0, 1}
  1 rot90_sin         sin of the quarter-turn angle, {-1, 0, 1}
  2 rot90_half        half-turn indicator, {0, 1} (with slot 1, losslessly codes the quadrant)
  3 translate_x       fraction of image width
  4 translate_y       fraction of image height
  5 log_scale         log of the isotropic scale factor
  6 rot_sin           sin of the continuous rotation angle
  7 rot_cos_m1        cos(angle) - 1
  8 aniso_log_ratio   log of the x/y stretch ratio

Affines act on centered, normalized coordinates (the [-1, 1] square); they are
stored as forward (content-moving) 3x3 homogeneous matrices and inverted for
resampling. Warping uses bilinear interpolation with reflection padding; pure
flips, quarter turns, and integer translations are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ShapeError, TransformError

LABEL_DIM = 9
TRANSFORMS = ("flip", "rot90", "translate", "scale", "rotate", "aniso")


@dataclass
class AugmentConfig:
    enabled: bool = False
    p: float = 0.12  # per-transform application probability
    translate_max: float = 0.125
    scale_log_std: float = 0.2 * math.log(2.0)
    rotate_max_deg: float = 15.0
    aniso_log_std: float = 0.2 * math.log(2.0)
    mode: str = "embedding"  # embedding | token

    def __post_init__(self) -> None:
        if not (0.0 <= self.p <= 1.0):
            raise TransformError("application probability must lie in [0, 1]")
        if self.mode not in ("embedding", "token"):
            raise TransformError(f"unknown conditioning mode {self.mode!r}")


@dataclass
class AugParams:
    label: Tensor  # (9,)
    affine: Tensor  # (3, 3) homogeneous forward transform
    applied: dict[str, bool] = field(default_factory=dict)

    @property
    def is_identity(self) -> bool:
        return bool((self.label == 0).all())


def identity_params() -> AugParams:
    return AugParams(label=torch.zeros(LABEL_DIM), affine=torch.eye(3),
                     applied={name: False for name in TRANSFORMS})


def _translation(tx: float, ty: float) -> Tensor:
    m = torch.eye(3)
    m[0, 2] = 2.0 * tx  # normalized coords span 2 units
    m[1, 2] = 2.0 * ty
    return m


def _rotation(sin_t: float, cos_t: float) -> Tensor:
    m = torch.eye(3)
    m[0, 0], m[0, 1] = cos_t, -sin_t
    m[1, 0], m[1, 1] = sin_t, cos_t
    return m


def _diag(sx: float, sy: float) -> Tensor:
    m = torch.eye(3)
    m[0, 0], m[1, 1] = sx, sy
    return m


def affine_from_label(label: Tensor) -> Tensor:
    """Reconstruct the forward affine from a label (labels are lossless)."""
    if label.shape != (LABEL_DIM,):
        raise ShapeError(f"label must be a {LABEL_DIM}-vector")
    flip = _diag(-1.0 if label[0] > 0.5 else 1.0, 1.0)
    sin90, half = float(label[1]), float(label[2])
    cos90 = -1.0 if half > 0.5 else (1.0 - abs(sin90))
    rot90 = _rotation(sin90, cos90)
    trans = _translation(float(label[3]), float(label[4]))
    scale = _diag(math.exp(float(label[5])), math.exp(float(label[5])))
    rot = _rotation(float(label[6]), float(label[7]) + 1.0)
    r = float(label[8])
    aniso = _diag(math.exp(r / 2.0), math.exp(-r / 2.0))
    return aniso @ rot @ scale @ trans @ rot90 @ flip


def sample_augmentation(rng: torch.Generator, config: AugmentConfig) -> AugParams:
    """Draw each transform independently and compose in fixed order."""
    label = torch.zeros(LABEL_DIM)
    applied: dict[str, bool] = {}

    def coin() -> bool:
        return bool(torch.rand((), generator=rng) < config.p)

    def uniform(lo: float, hi: float) -> float:
        return float(torch.empty(()).uniform_(lo, hi, generator=rng))

    def normal(std: float) -> float:
        return float(torch.randn((), generator=rng)) * std

    applied["flip"] = coin()
    if applied["flip"]:
        label[0] = 1.0
    applied["rot90"] = coin()
    if applied["rot90"]:
        c = int(torch.randint(1, 4, (), generator=rng))
        label[1] = {1: 1.0, 2: 0.0, 3: -1.0}[c]  # exact sin of the quarter turn
        label[2] = 1.0 if c == 2 else 0.0
    applied["translate"] = coin()
    if applied["translate"]:
        label[3] = uniform(-config.translate_max, config.translate_max)
        label[4] = uniform(-config.translate_max, config.translate_max)
    applied["scale"] = coin()
    if applied["scale"]:
        label[5] = normal(config.scale_log_std)
    applied["rotate"] = coin()
    if applied["rotate"]:
        theta = uniform(-1.0, 1.0) * math.radians(config.rotate_max_deg)
        label[6] = math.sin(theta)
        label[7] = math.cos(theta) - 1.0
    applied["aniso"] = coin()
    if applied["aniso"]:
        label[8] = normal(config.aniso_log_std)

    return AugParams(label=label, affine=affine_from_label(label), applied=applied)


def compose(second: AugParams, first: AugParams) -> AugParams:
    """Transform equivalent to applying ``first`` then ``second``.

    The composed label is not a pipeline draw, so only the affine is meaningful;
    the label is kept only for the identity check.
    """
    affine = second.affine @ first.affine
    ident = torch.allclose(affine, torch.eye(3), atol=1e-12)
    label = torch.zeros(LABEL_DIM) if ident else torch.full((LABEL_DIM,), float("nan"))
    return AugParams(label=label, affine=affine, applied={})


def apply(image: Tensor, params: AugParams) -> Tensor:
    """Warp one (C, H, W) image; identity parameters pass through bit-exactly.

    Resampling runs in float64 so grid coordinates that land on pixel centers
    (pure flips, quarter turns, integer translations) stay exact.
    """
    if image.ndim != 3:
        raise ShapeError("apply expects a single (C, H, W) image")
    if params.is_identity:
        return image
    det = torch.linalg.det(params.affine[:2, :2])
    if abs(float(det)) < 1e-8:
        raise TransformError("degenerate affine (determinant ~ 0)")
    theta = torch.linalg.inv(params.affine.to(torch.float64))[:2][None]
    grid = F.affine_grid(theta, (1, *image.shape), align_corners=False)
    out = F.grid_sample(image[None].to(torch.float64), grid, mode="bilinear",
                        padding_mode="reflection", align_corners=False)
    return out[0].to(image.dtype)


def apply_batch(images: Tensor, params_list: list[AugParams]) -> tuple[Tensor, Tensor]:
    """Warp a batch; returns (augmented images, stacked labels)."""
    if images.shape[0] != len(params_list):
        raise ShapeError("one AugParams per image required")
    out = torch.stack([apply(img, p) for img, p in zip(images, params_list)])
    labels = torch.stack([p.label for p in params_list]).to(images.dtype)
    return out, labels


def sample_batch(rng: torch.Generator, config: AugmentConfig, n: int) -> list[AugParams]:
    if not config.enabled:
        return [identity_params() for _ in range(n)]
    return [sample_augmentation(rng, config) for _ in range(n)]


def condition_with_label(carrier, label: Tensor, projector) -> object:
    """Fuse a label into conditioning: embedding pathway or an extra token.

    ``carrier`` is a ConditionEmbedding (embedding path) or a (B, N, D) token
    stack (token path, label token prepended).
    """
    from .backbones.common import ConditionEmbedding

    if label.ndim == 1:
        label = label[None]
    if label.shape[-1] != LABEL_DIM:
        raise ShapeError(f"label must have {LABEL_DIM} entries")
    if isinstance(carrier, ConditionEmbedding):
        return carrier.add(projector(label.to(carrier.vector.dtype)), "augmentation")
    if isinstance(carrier, Tensor) and carrier.ndim == 3:
        token = projector(label.to(carrier.dtype))[:, None, :]
        return torch.cat([token.expand(carrier.shape[0], 1, -1), carrier], dim=1)
    raise ShapeError("carrier must be a ConditionEmbedding or a token stack")
