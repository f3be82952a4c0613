"""Training orchestration: run configs, the step loop, EMA, checkpoints, metrics.

A run is fully determined by its RunConfig and seed: batch order, noise,
augmentation draws, and weight init all flow from named substreams of the root
seed, so equal configs produce equal metrics streams and checkpoints resume
exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import Tensor, nn

from . import __version__
from .archive import load_archive, save_archive
from .augment import AugmentConfig
from .backbones import BackboneSpec, build_backbone
from .data import Dataset, make_dataset
from .distill import ContrastiveConfig, ContrastiveLearner, contrastive_step, ema_update, make_teacher
from .errors import ConfigError, TrainingDiverged
from .formulations import DiffusionModel, Formulation, UncertaintyHead
from .rngutil import SeedStreams
from .samplers import SamplerConfig
from .selfcond import SelfCondConfig
from .taps import FeatureTap

CHECKPOINT_VERSION = 1


@dataclass
class DataConfig:
    name: str = "shapes16"
    n: int = 512
    image_size: int = 16
    seed: int = 0


@dataclass
class OptimConfig:
    name: str = "adam"  # adam | adamw
    lr: float = 4e-4
    weight_decay: float = 0.0
    warmup_steps: int = 0
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self) -> None:
        if self.name not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer {self.name!r}")


@dataclass
class RunConfig:
    formulation: Formulation = field(default_factory=lambda: Formulation(kind="rf"))
    backbone: BackboneSpec = field(default_factory=lambda: BackboneSpec(
        family="dit", image_size=16, in_channels=3, hidden_size=64, depth=6, heads=4, patch_size=4))
    selfcond: SelfCondConfig = field(default_factory=SelfCondConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(solver="euler_rf", steps=50))
    batch_size: int = 32
    epochs: int = 0
    steps: int = 0  # takes precedence over epochs when nonzero
    seed: int = 0
    loss_weighting: str = "none"
    log_every: int = 10
    checkpoint_every: int = 0  # 0 = final only

    def steps_per_epoch(self, dataset_len: int) -> int:
        return max(1, math.ceil(dataset_len / self.batch_size))

    def total_steps(self, dataset_len: int) -> int:
        if self.steps:
            return self.steps
        if self.epochs:
            return self.epochs * self.steps_per_epoch(dataset_len)
        raise ConfigError("config must set steps or epochs")


def weight_decay_policy(parameter_name: str, family: str) -> bool:
    """Whether weight decay applies to this parameter.

    Biases and positional embeddings are excluded; the summary token is
    explicitly included; every other weight decays.
    """
    leaf = parameter_name.split(".")[-1]
    if "cls_token" in parameter_name:
        return True
    if leaf == "bias":
        return False
    if "pos_embed" in parameter_name:
        return False
    if leaf in ("weight", "cls_gates") or leaf.endswith("_token"):
        return True
    raise ConfigError(f"parameter {parameter_name!r} has no weight-decay tag")


def decay_param_groups(module: nn.Module, family: str, weight_decay: float) -> list[dict]:
    decay, no_decay = [], []
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        (decay if weight_decay_policy(name, family) else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def build_model(cfg: RunConfig, dataset: Dataset | None = None,
                streams: SeedStreams | None = None) -> DiffusionModel:
    """Assemble the wrapped denoiser for a run (deterministic given the seed)."""
    if streams is not None:
        torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=streams.init)))
    selfcond = cfg.selfcond if cfg.selfcond.enabled else None
    backbone = build_backbone(cfg.backbone, selfcond=selfcond, use_aug_label=cfg.augment.enabled)
    if cfg.backbone.family == "planted_mlp" and dataset is not None:
        backbone.set_planted_direction(dataset.class_mean_direction())
    return DiffusionModel(backbone, cfg.formulation)


def _feature_dim(model: DiffusionModel, cfg: RunConfig) -> int:
    backbone = model.backbone
    if cfg.contrastive.target_source == "cls" or cfg.backbone.family in ("uvit", "dit"):
        return cfg.backbone.hidden_size
    if cfg.backbone.family == "planted_mlp":
        return cfg.backbone.tap_width
    return backbone.tap_channels[cfg.selfcond.tap_layer - 1]


class TrainResult(NamedTuple):
    checkpoint: "Checkpoint"
    metrics: list[dict]
    model: DiffusionModel
    ema_model: DiffusionModel
    dataset: Dataset


@dataclass
class Checkpoint:
    step: int
    config: RunConfig
    version: int = CHECKPOINT_VERSION
    student_state: dict = field(default_factory=dict)
    ema_state: dict = field(default_factory=dict)
    learner_state: dict | None = None
    uncertainty_state: dict | None = None
    optimizer_state: dict | None = None
    rng_states: dict | None = None


def _state_to_arrays(state: dict, prefix: str, arrays: dict) -> None:
    for name, tensor in state.items():
        arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()


def _arrays_to_state(arrays: dict, prefix: str) -> dict:
    pfx = prefix + "/"
    return {k[len(pfx):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(pfx)}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    from .config import config_hash, config_to_dict

    arrays: dict[str, np.ndarray] = {}
    _state_to_arrays(ckpt.student_state, "student", arrays)
    _state_to_arrays(ckpt.ema_state, "ema", arrays)
    if ckpt.learner_state is not None:
        _state_to_arrays(ckpt.learner_state, "learner", arrays)
    if ckpt.uncertainty_state is not None:
        _state_to_arrays(ckpt.uncertainty_state, "uncertainty", arrays)
    opt_meta = None
    if ckpt.optimizer_state is not None:
        opt_meta = {"param_groups": ckpt.optimizer_state["param_groups"],
                    "state_keys": {}}
        for idx, entry in ckpt.optimizer_state["state"].items():
            opt_meta["state_keys"][str(idx)] = sorted(entry.keys())
            for key, value in entry.items():
                arrays[f"opt/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    if ckpt.rng_states is not None:
        for name, state in ckpt.rng_states.items():
            arrays[f"rng/{name}"] = np.asarray(state)
    cfg_dict = config_to_dict(ckpt.config)
    meta = {
        "kind": "checkpoint",
        "checkpoint_version": ckpt.version,
        "code_version": __version__,
        "step": ckpt.step,
        "config": cfg_dict,
        "config_hash": config_hash(ckpt.config),
        "optimizer": opt_meta,
        "has_learner": ckpt.learner_state is not None,
        "has_uncertainty": ckpt.uncertainty_state is not None,
    }
    save_archive(path, arrays, meta)


def load_checkpoint(path) -> Checkpoint:
    from .config import config_from_dict

    arrays, meta = load_archive(path)
    config = config_from_dict(RunConfig, meta["config"])
    opt_state = None
    if meta.get("optimizer"):
        opt_state = {"param_groups": meta["optimizer"]["param_groups"], "state": {}}
        for idx, keys in meta["optimizer"]["state_keys"].items():
            opt_state["state"][int(idx)] = {
                key: torch.from_numpy(arrays[f"opt/{idx}/{key}"].copy()) for key in keys
            }
    rng_states = {k[len("rng/"):]: v for k, v in arrays.items() if k.startswith("rng/")}
    return Checkpoint(
        step=meta["step"],
        config=config,
        version=meta["checkpoint_version"],
        student_state=_arrays_to_state(arrays, "student"),
        ema_state=_arrays_to_state(arrays, "ema"),
        learner_state=_arrays_to_state(arrays, "learner") if meta.get("has_learner") else None,
        uncertainty_state=_arrays_to_state(arrays, "uncertainty") if meta.get("has_uncertainty") else None,
        optimizer_state=opt_state,
        rng_states=rng_states or None,
    )


def model_from_checkpoint(path_or_ckpt, use_ema: bool = True) -> tuple[DiffusionModel, Checkpoint]:
    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt)
    cfg = ckpt.config
    dataset = make_dataset(cfg.data.name, n=cfg.data.n, seed=cfg.data.seed,
                           image_size=cfg.data.image_size)
    model = build_model(cfg, dataset=dataset)
    model.load_state_dict(ckpt.ema_state if use_ema and ckpt.ema_state else ckpt.student_state)
    model.eval()
    return model, ckpt


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(p.grad.detach().pow(2).sum())
    return math.sqrt(total)


def final_epoch_loss(metrics: list[dict], cfg: RunConfig, dataset_len: int | None = None) -> float:
    """Mean diffusion loss over the final epoch's records (profiler statistic)."""
    if not metrics:
        return float("nan")
    n = dataset_len if dataset_len is not None else cfg.data.n
    window = cfg.steps_per_epoch(n)
    last_step = metrics[-1]["step"]
    vals = [m["loss_diff"] for m in metrics if m["step"] > last_step - window]
    return float(np.mean(vals)) if vals else float("nan")


def train(cfg: RunConfig, out_dir=None, resume_from: Checkpoint | str | None = None,
          dataset: Dataset | None = None) -> TrainResult:
    """Run the training loop; optionally persist metrics/checkpoints under out_dir."""
    streams = SeedStreams(cfg.seed)
    streams.seed_torch_global()
    if dataset is None:
        dataset = make_dataset(cfg.data.name, n=cfg.data.n, seed=cfg.data.seed,
                               image_size=cfg.data.image_size)

    model = build_model(cfg, dataset=dataset, streams=streams)
    ema_model = make_teacher(model)
    learner = None
    if cfg.contrastive.gamma > 0:
        if not cfg.selfcond.enabled:
            raise ConfigError("contrastive distillation requires self-conditioning to be enabled")
        learner = ContrastiveLearner(_feature_dim(model, cfg), cfg.contrastive)
    uncertainty = UncertaintyHead() if cfg.loss_weighting == "uncertainty" else None

    trainable: list[nn.Module] = [model]
    if learner is not None:
        trainable.append(learner)
    if uncertainty is not None:
        trainable.append(uncertainty)
    groups: list[dict] = []
    for module in trainable:
        groups.extend(decay_param_groups(module, cfg.backbone.family, cfg.optim.weight_decay))
    opt_cls = torch.optim.AdamW if cfg.optim.name == "adamw" else torch.optim.Adam
    optimizer = opt_cls(groups, lr=cfg.optim.lr, betas=cfg.optim.betas)

    start_step = 0
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        model.load_state_dict(ckpt.student_state)
        ema_model.load_state_dict(ckpt.ema_state)
        if learner is not None and ckpt.learner_state is not None:
            learner.load_state_dict(ckpt.learner_state)
        if uncertainty is not None and ckpt.uncertainty_state is not None:
            uncertainty.load_state_dict(ckpt.uncertainty_state)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.rng_states is not None:
            streams.load_state(ckpt.rng_states)
        start_step = ckpt.step

    total_steps = cfg.total_steps(len(dataset))
    out_path = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        mode = "a" if start_step else "w"
        metrics_file = open(out_path / "metrics.jsonl", mode)

    def make_checkpoint(step: int) -> Checkpoint:
        return Checkpoint(
            step=step,
            config=cfg,
            student_state={k: v.clone() for k, v in model.state_dict().items()},
            ema_state={k: v.clone() for k, v in ema_model.state_dict().items()},
            learner_state={k: v.clone() for k, v in learner.state_dict().items()} if learner else None,
            uncertainty_state={k: v.clone() for k, v in uncertainty.state_dict().items()} if uncertainty else None,
            optimizer_state=optimizer.state_dict(),
            rng_states=streams.state(),
        )

    metrics: list[dict] = []
    nan_streak = 0
    t0 = time.monotonic()
    model.train()
    for step in range(start_step, total_steps):
        idx = torch.randint(0, len(dataset), (cfg.batch_size,), generator=streams.data)
        batch = dataset.images[idx]

        warmup = cfg.optim.warmup_steps
        lr = cfg.optim.lr * min(1.0, (step + 1) / warmup) if warmup else cfg.optim.lr
        for group in optimizer.param_groups:
            group["lr"] = lr

        losses = contrastive_step(
            model, ema_model, batch, cfg.contrastive, cfg.formulation, streams,
            learner=learner, aug_config=cfg.augment, weighting=cfg.loss_weighting,
            uncertainty=uncertainty,
        )
        optimizer.zero_grad(set_to_none=True)
        if torch.isfinite(losses.total):
            losses.total.backward()
            optimizer.step()
            nan_streak = 0
        else:
            nan_streak += 1
            if nan_streak >= 50:
                raise TrainingDiverged(
                    f"loss non-finite for {nan_streak} consecutive steps at step {step}"
                )
        ema_update(ema_model, model, cfg.contrastive.ema_decay)
        if learner is not None:
            learner.ema_step()

        is_log_step = (step + 1) % cfg.log_every == 0 or step + 1 == total_steps
        record = {
            "step": step + 1,
            "loss_total": float(losses.total.detach()),
            "loss_diff": float(losses.diff.detach()),
            "loss_moco": float(losses.moco.detach()),
            "lr": lr,
            "grad_norm": _grad_norm(p for g in optimizer.param_groups
                                    for p in g["params"]) if is_log_step else float("nan"),
            "wall_time": time.monotonic() - t0,
        }
        metrics.append(record)
        if metrics_file is not None and is_log_step:
            stable = {k: v for k, v in record.items() if k != "wall_time"}
            metrics_file.write(json.dumps(stable, sort_keys=True) + "\n")
        if out_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(make_checkpoint(step + 1),
                            out_path / "checkpoints" / f"checkpoint_{step + 1:07d}.zip")

    if metrics_file is not None:
        metrics_file.close()
    final = make_checkpoint(total_steps)
    if out_path is not None:
        save_checkpoint(final, out_path / "checkpoints" / "checkpoint_final.zip")
    model.eval()
    ema_model.eval()
    return TrainResult(checkpoint=final, metrics=metrics, model=model,
                       ema_model=ema_model, dataset=dataset)
