"""Contrastive self-distillation against the EMA teacher.

The model's own EMA copy (already maintained for sampling) doubles as the
momentum teacher: online features from the self-conditioning layer, projected
through a time-dependent head, are pulled toward teacher features of an
independently augmented view extracted at one fixed timestep (the probing
timestep). The loss is a symmetrized InfoNCE and enters the objective as
loss_total = loss_diff + gamma * loss_moco.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .augment import AugmentConfig, apply_batch, sample_batch
from .backbones.common import sinusoidal_embedding
from .errors import ConfigError, DomainError, StructureError
from .formulations import Formulation, diffusion_loss, perturb, sample_training_time, training_target
from .selfcond import pool_feature

TARGET_SOURCES = ("pooled", "cls")


@dataclass
class ContrastiveConfig:
    gamma: float = 0.0  # 0 degenerates exactly to pure diffusion training
    temperature: float = 0.2
    ema_decay: float = 0.9999
    target_timestep: float = 0.25  # fixed teacher extraction time (the probing timestep)
    target_source: str = "pooled"
    head_dim: int = 256

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.target_source not in TARGET_SOURCES:
            raise ConfigError(f"unknown target source {self.target_source!r}")


def ema_update(teacher: nn.Module, student: nn.Module, decay: float) -> nn.Module:
    """teacher <- decay * teacher + (1 - decay) * student, elementwise, in place.

    Floating-point buffers (e.g. normalization statistics) follow the same
    rule; integer buffers are copied.
    """
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise StructureError("teacher/student parameter sets are not isomorphic")
    with torch.no_grad():
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise StructureError(f"parameter {name} differs in shape")
            tp.mul_(decay).add_(sp, alpha=1.0 - decay)
        for (tn, tb), (sn, sb) in zip(teacher.named_buffers(), student.named_buffers()):
            if tn != sn:
                raise StructureError("teacher/student buffer sets are not isomorphic")
            if tb.dtype.is_floating_point:
                tb.mul_(decay).add_(sb, alpha=1.0 - decay)
            else:
                tb.copy_(sb)
    return teacher


def make_teacher(module: nn.Module) -> nn.Module:
    """Detached EMA copy; receives no gradient, ever."""
    teacher = copy.deepcopy(module)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


class ProjectionHead(nn.Module):
    """3-layer MLP with batch-standardized hidden layers and a time-dependent input.

    The time embedding is added to the feature before the first linear layer,
    letting one head serve every noise level.
    """

    def __init__(self, in_dim: int, out_dim: int = 256, hidden_mult: int = 4):
        super().__init__()
        hidden = hidden_mult * in_dim
        self.in_dim = in_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, out_dim), nn.BatchNorm1d(out_dim, affine=False),
        )

    def forward(self, feature: Tensor, t_value: Tensor) -> Tensor:
        temb = sinusoidal_embedding(t_value, self.in_dim).to(feature.dtype)
        return self.net(feature + temb)


class PredictionHead(nn.Module):
    """2-layer online-only head on top of the projection."""

    def __init__(self, dim: int = 256, hidden_mult: int = 4):
        super().__init__()
        hidden = hidden_mult * dim
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, dim),
        )

    def forward(self, z: Tensor) -> Tensor:
        return self.net(z)


def project(feature: Tensor, t_value: Tensor, head: ProjectionHead,
            predictor: PredictionHead | None = None) -> Tensor:
    """Projection (plus the extra prediction head on the online branch)."""
    z = head(feature, t_value)
    return predictor(z) if predictor is not None else z


def info_nce(q: Tensor, k: Tensor, temperature: float) -> Tensor:
    """Mean InfoNCE with in-batch negatives; rows are L2-normalized internally."""
    if q.shape[0] == 0 or k.shape[0] == 0:
        raise DomainError("info_nce needs at least one pair")
    if q.shape != k.shape:
        raise ConfigError("q and k must have matching shapes")
    qn = F.normalize(q, dim=1)
    kn = F.normalize(k, dim=1)
    logits = qn @ kn.T / temperature
    labels = torch.arange(q.shape[0], device=q.device)
    return F.cross_entropy(logits, labels)


class ContrastiveLearner(nn.Module):
    """Online projection+prediction heads plus their EMA-teacher projection copy."""

    def __init__(self, feature_dim: int, cfg: ContrastiveConfig):
        super().__init__()
        self.cfg = cfg
        self.online_proj = ProjectionHead(feature_dim, cfg.head_dim)
        self.online_pred = PredictionHead(cfg.head_dim)
        self.teacher_proj = make_teacher(self.online_proj)

    def online(self, feature: Tensor, t_value: Tensor) -> Tensor:
        return project(feature, t_value, self.online_proj, self.online_pred)

    def teacher(self, feature: Tensor, t_value: Tensor) -> Tensor:
        with torch.no_grad():
            return project(feature, t_value, self.teacher_proj)

    def ema_step(self) -> None:
        ema_update(self.teacher_proj, self.online_proj, self.cfg.ema_decay)


class StepLosses(NamedTuple):
    total: Tensor
    diff: Tensor
    moco: Tensor


def _source_feature(model, tap, source: str) -> Tensor:
    if source == "cls":
        backbone = model.backbone
        if not getattr(backbone, "with_cls", False):
            raise ConfigError("cls target source requires a summary-token backbone")
        return backbone.summary_state(tap)
    return pool_feature(tap)


def contrastive_step(
    model,
    ema_model,
    batch: Tensor,
    cfg: ContrastiveConfig,
    f: Formulation,
    rng,
    learner: ContrastiveLearner | None = None,
    aug_config: AugmentConfig | None = None,
    weighting: str = "none",
    uncertainty=None,
) -> StepLosses:
    """One training objective evaluation: diffusion loss plus, when gamma > 0,
    the symmetrized contrastive term against the EMA teacher.

    ``rng`` carries named generators (.noise, .augment). With gamma = 0 the
    step draws nothing beyond what plain diffusion training draws, keeping
    trajectories bit-identical to a pure diffusion loop.
    """
    aug_config = aug_config or AugmentConfig(enabled=False)
    b = batch.shape[0]
    t = sample_training_time(f, rng.noise, b)

    params1 = sample_batch(rng.augment, aug_config, b)
    x1, labels1 = apply_batch(batch, params1)
    eps1 = torch.randn(batch.shape, generator=rng.noise, dtype=batch.dtype)
    xt1 = perturb(f, x1, t, eps1)
    target1 = training_target(f, x1, eps1)

    use_contrastive = cfg.gamma > 0
    tap = ()
    if use_contrastive:
        sc = getattr(model.backbone, "selfcond", None)
        if sc is None:
            raise ConfigError("contrastive distillation needs a configured self-conditioning tap")
        tap = (sc.tap_layer,)
    aug_label1 = labels1 if aug_config.enabled else None
    pred1, taps1 = model.predict(xt1, t, aug_label=aug_label1, taps=tap)
    loss_diff = diffusion_loss(pred1, target1, weighting=weighting, sigma_or_t=t,
                               uncertainty=uncertainty)
    if not use_contrastive:
        zero = torch.zeros((), dtype=loss_diff.dtype)
        return StepLosses(total=loss_diff, diff=loss_diff, moco=zero)

    params2 = sample_batch(rng.augment, aug_config, b)
    x2, labels2 = apply_batch(batch, params2)
    eps2 = torch.randn(batch.shape, generator=rng.noise, dtype=batch.dtype)
    xt2 = perturb(f, x2, t, eps2)
    aug_label2 = labels2 if aug_config.enabled else None
    _, taps2 = model.predict(xt2, t, aug_label=aug_label2, taps=tap)

    t_value = model._time_value(t)
    q1 = learner.online(_source_feature(model, taps1[tap[0]], cfg.target_source), t_value)
    q2 = learner.online(_source_feature(model, taps2[tap[0]], cfg.target_source), t_value)

    t_star = torch.full((b,), float(cfg.target_timestep), dtype=t.dtype)
    assert bool((t_star == float(cfg.target_timestep)).all()), "teacher time must stay fixed"
    with torch.no_grad():
        eps1s = torch.randn(batch.shape, generator=rng.noise, dtype=batch.dtype)
        eps2s = torch.randn(batch.shape, generator=rng.noise, dtype=batch.dtype)
        _, tapsA = ema_model.predict(perturb(f, x1, t_star, eps1s), t_star,
                                     aug_label=aug_label1, taps=tap)
        _, tapsB = ema_model.predict(perturb(f, x2, t_star, eps2s), t_star,
                                     aug_label=aug_label2, taps=tap)
        tv_star = ema_model._time_value(t_star)
        k1 = learner.teacher(_source_feature(ema_model, tapsA[tap[0]], cfg.target_source), tv_star)
        k2 = learner.teacher(_source_feature(ema_model, tapsB[tap[0]], cfg.target_source), tv_star)

    loss_moco = info_nce(q1, k2, cfg.temperature) + info_nce(q2, k1, cfg.temperature)
    total = loss_diff + cfg.gamma * loss_moco
    return StepLosses(total=total, diff=loss_diff, moco=loss_moco)
