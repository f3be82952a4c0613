"""Linear and dense probing of frozen features."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import DegenerateLabelError, ShapeError


@dataclass
class ProbeConfig:
    epochs: int = 15
    lr: float = 4e-3
    schedule: str = "cosine"
    batch_size: int = 256
    val_fraction: float = 0.2
    seed: int = 0
    upsample: str = "bilinear"  # dense probe only: bilinear | nearest


@dataclass
class ProbeReport:
    layer: int
    timestep: float
    train_metric: float
    val_metric: float
    metric: str = "accuracy"
    hyperparams: dict = field(default_factory=dict)
    checkpoint_id: str = ""

    def to_dict(self) -> dict:
        return {
            "layer": self.layer, "timestep": self.timestep, "metric": self.metric,
            "train": self.train_metric, "val": self.val_metric,
            "hyperparams": self.hyperparams, "checkpoint_id": self.checkpoint_id,
        }


def _split(n: int, val_fraction: float, seed: int) -> tuple[Tensor, Tensor]:
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(n, generator=g)
    n_val = max(1, int(round(n * val_fraction)))
    return perm[n_val:], perm[:n_val]


def _acc(logits: Tensor, labels: Tensor) -> float:
    return float((logits.argmax(dim=1) == labels).float().mean())


def linear_probe(features: Tensor, labels: Tensor, cfg: ProbeConfig | None = None,
                 layer: int = 0, timestep: float = 0.0, checkpoint_id: str = "") -> ProbeReport:
    """Parameter-free batch standardization plus one linear layer on frozen features."""
    cfg = cfg or ProbeConfig()
    features = features.detach().float()
    labels = labels.long()
    classes = torch.unique(labels)
    if classes.numel() < 2:
        raise DegenerateLabelError("linear probe needs at least two classes")
    n_classes = int(labels.max()) + 1
    train_idx, val_idx = _split(features.shape[0], cfg.val_fraction, cfg.seed)

    g = torch.Generator().manual_seed(cfg.seed + 1)
    bn = nn.BatchNorm1d(features.shape[1], affine=False)
    head = nn.Linear(features.shape[1], n_classes)
    nn.init.zeros_(head.weight)  # zero start: no init noise at desk-scale step counts
    nn.init.zeros_(head.bias)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)
    steps_per_epoch = max(1, math.ceil(train_idx.numel() / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch

    best_val, step = 0.0, 0
    for _ in range(cfg.epochs):
        order = train_idx[torch.randperm(train_idx.numel(), generator=g)]
        bn.train()
        head.train()
        for start in range(0, order.numel(), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.numel() < 2:
                continue
            lr = cfg.lr
            if cfg.schedule == "cosine":
                lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, total)))
            for group in opt.param_groups:
                group["lr"] = lr
            loss = F.cross_entropy(head(bn(features[idx])), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        bn.eval()
        head.eval()
        with torch.no_grad():
            best_val = max(best_val, _acc(head(bn(features[val_idx])), labels[val_idx]))
    with torch.no_grad():
        bn.eval()
        train_acc = _acc(head(bn(features[train_idx])), labels[train_idx])
    return ProbeReport(
        layer=layer, timestep=timestep, train_metric=train_acc, val_metric=best_val,
        metric="accuracy",
        hyperparams={"epochs": cfg.epochs, "lr": cfg.lr, "schedule": cfg.schedule},
        checkpoint_id=checkpoint_id,
    )


@dataclass
class SweepReport:
    grid: list[ProbeReport]
    layers: list[int]
    timesteps: list[float]

    @property
    def argmax(self) -> ProbeReport:
        return max(self.grid, key=lambda r: r.val_metric)

    def layer_profile(self, timestep: float | None = None) -> list[tuple[int, float]]:
        """Accuracy per layer (at one timestep), the layer-bars surface."""
        rows = [r for r in self.grid if timestep is None or r.timestep == timestep]
        return [(r.layer, r.val_metric) for r in sorted(rows, key=lambda r: r.layer)]

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "timesteps": self.timesteps,
            "grid": [r.to_dict() for r in self.grid],
            "argmax": self.argmax.to_dict(),
        }


def sweep(model, dataset, layers, timesteps, probe_cfg: ProbeConfig | None = None,
          seed: int = 0, checkpoint_id: str = "") -> SweepReport:
    """Probe the Cartesian product of layers x timesteps."""
    from .features import extract_features

    if not layers or not timesteps:
        raise DegenerateLabelError("sweep needs non-empty layer and timestep grids")
    grid = []
    for t in timesteps:
        for layer in layers:
            feats, labels = extract_features(model, dataset, t, layer, reduce="pooled", seed=seed)
            grid.append(linear_probe(feats, labels, probe_cfg, layer=layer, timestep=float(t),
                                     checkpoint_id=checkpoint_id))
    return SweepReport(grid=grid, layers=list(layers), timesteps=[float(t) for t in timesteps])


def mean_iou(pred: Tensor, target: Tensor) -> float:
    """IoU averaged over the classes present in the ground truth."""
    present = torch.unique(target)
    ious = []
    for c in present:
        inter = ((pred == c) & (target == c)).sum()
        union = ((pred == c) | (target == c)).sum()
        ious.append(float(inter) / float(union))
    return float(sum(ious) / len(ious))


def dense_probe(token_features: Tensor, dense_labels: Tensor, cfg: ProbeConfig | None = None,
                layer: int = 0, timestep: float = 0.0, checkpoint_id: str = "") -> ProbeReport:
    """Per-token linear head (with LayerNorm) upsampled to the label resolution."""
    cfg = cfg or ProbeConfig()
    if token_features.ndim != 3:
        raise ShapeError("dense probe expects (N, tokens, D) features")
    n, n_tok, dim = token_features.shape
    side = int(round(math.sqrt(n_tok)))
    if side * side != n_tok:
        raise ShapeError("token count must form a square grid")
    h, w = dense_labels.shape[-2:]
    if h % side != 0 or w % side != 0:
        raise ShapeError(f"label resolution {h}x{w} not divisible by token grid {side}")
    labels = dense_labels.long()
    # single-class dense labels are fine: a bias-only solution reaches mIoU 1
    n_classes = max(2, int(labels.max()) + 1)

    features = token_features.detach().float()
    train_idx, val_idx = _split(n, cfg.val_fraction, cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed + 1)
    head = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, n_classes))
    nn.init.zeros_(head[1].weight)
    nn.init.zeros_(head[1].bias)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)

    def logits_for(idx: Tensor) -> Tensor:
        lg = head(features[idx])  # (b, tokens, C)
        lg = lg.transpose(1, 2).reshape(idx.numel(), n_classes, side, side)
        if cfg.upsample == "nearest":
            return F.interpolate(lg, size=(h, w), mode="nearest")
        return F.interpolate(lg, size=(h, w), mode="bilinear", align_corners=False)

    step, total = 0, cfg.epochs * max(1, math.ceil(train_idx.numel() / cfg.batch_size))
    for _ in range(cfg.epochs):
        order = train_idx[torch.randperm(train_idx.numel(), generator=g)]
        for start in range(0, order.numel(), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            lr = cfg.lr
            if cfg.schedule == "cosine":
                lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, total)))
            for group in opt.param_groups:
                group["lr"] = lr
            loss = F.cross_entropy(logits_for(idx), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    with torch.no_grad():
        train_miou = mean_iou(logits_for(train_idx).argmax(dim=1), labels[train_idx])
        val_miou = mean_iou(logits_for(val_idx).argmax(dim=1), labels[val_idx])
    return ProbeReport(
        layer=layer, timestep=timestep, train_metric=train_miou, val_metric=val_miou,
        metric="miou", hyperparams={"epochs": cfg.epochs, "lr": cfg.lr},
        checkpoint_id=checkpoint_id,
    )
