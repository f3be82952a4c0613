"""Deterministic ODE samplers for the three diffusion families.

Solver/formulation pairs follow each family's standard practice:

* ``euler_ddim``  -- ddpm, uniform integer grid, deterministic (eta = 0) update
* ``heun``        -- edm, rho-spaced sigma grid, second-order with first-order
  final step (2 * steps - 1 network evaluations)
* ``euler_rf``    -- rf, uniform t grid with optional timestep shift
* ``rk45``        -- rf, adaptive Dormand-Prince via scipy, integrated
  per-sample so results are independent of batch sharding
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from scipy.integrate import solve_ivp
from torch import Tensor

from .errors import ConfigError, DomainError, ShapeError
from .formulations import DDPM, EDM, RF, Formulation, convert_prediction

SOLVER_FAMILIES = {
    "euler_ddim": (DDPM,),
    "heun": (EDM,),
    "euler_rf": (RF,),
    "rk45": (RF,),
}


@dataclass
class SamplerConfig:
    solver: str
    steps: int = 50
    rho: float = 7.0
    cfg_scale: float = 1.0
    cfg_interval: tuple[float, float] | None = None
    timestep_shift: float = 1.0
    rtol: float = 1e-4
    atol: float = 1e-4

    def __post_init__(self) -> None:
        if self.solver not in SOLVER_FAMILIES:
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.steps < 1:
            raise ConfigError("steps must be a positive integer")
        if self.cfg_scale < 1.0:
            raise ConfigError("cfg_scale must be >= 1")
        if self.timestep_shift < 1.0:
            raise ConfigError("timestep_shift must be >= 1")


class SampleResult(NamedTuple):
    samples: Tensor
    nfe: int
    times: np.ndarray


def shift_time(t, shift: float):
    """Remap a unit-interval solver time; fixes t=0 and t=1 for any shift."""
    return shift * t / (1.0 + (shift - 1.0) * t)


def cfg_combine(pred_cond: Tensor, pred_uncond: Tensor, scale: float, t: float,
                interval: tuple[float, float] | None) -> Tensor:
    """Classifier-free guidance with optional interval gating."""
    if pred_cond.shape != pred_uncond.shape:
        raise ShapeError("conditional/unconditional predictions differ in shape")
    if interval is not None and not (interval[0] <= t <= interval[1]):
        return pred_cond
    return pred_uncond + scale * (pred_cond - pred_uncond)


def edm_sigma_grid(steps: int, sigma_min: float, sigma_max: float, rho: float) -> np.ndarray:
    """rho-spaced noise-level discretization, highest noise first."""
    i = np.arange(steps, dtype=np.float64)
    grid = (sigma_max ** (1 / rho) + i / (steps - 1) * (sigma_min ** (1 / rho) - sigma_max ** (1 / rho))) ** rho
    return grid


def per_sample_noise(shape: tuple[int, ...], seed: int, index_offset: int = 0) -> Tensor:
    """Standard-normal init noise keyed by (seed, global sample index).

    Sample j is identical no matter how a batch is sharded, as long as the
    shard passes the right index_offset.
    """
    n = shape[0]
    out = torch.empty(shape)
    for j in range(n):
        key = np.random.SeedSequence(entropy=seed, spawn_key=(index_offset + j,))
        g = torch.Generator().manual_seed(int(key.generate_state(1, np.uint64)[0] >> 1))
        out[j] = torch.randn(shape[1:], generator=g)
    return out


class _CountingModel:
    """Wraps a model's predict() to count network function evaluations."""

    def __init__(self, model, cfg: SamplerConfig, class_label):
        self.model = model
        self.cfg = cfg
        self.class_label = class_label
        self.nfe = 0
        self.use_cfg = class_label is not None and cfg.cfg_scale > 1.0

    def __call__(self, x: Tensor, t: float, unit_time: float | None = None) -> Tensor:
        with torch.no_grad():
            pred_cond, _ = self.model.predict(x, t, class_label=self.class_label)
            self.nfe += 1
            if not self.use_cfg:
                return pred_cond
            pred_uncond, _ = self.model.predict(x, t, class_label=None)
            self.nfe += 1
            gate_t = unit_time if unit_time is not None else t
            return cfg_combine(pred_cond, pred_uncond, self.cfg.cfg_scale, gate_t, self.cfg.cfg_interval)


def _check_pair(f: Formulation, cfg: SamplerConfig) -> None:
    if f.kind not in SOLVER_FAMILIES[cfg.solver]:
        raise ConfigError(f"solver {cfg.solver!r} does not support the {f.kind} formulation")
    if cfg.cfg_interval is not None:
        lo, hi = f.time_domain()
        a, b = cfg.cfg_interval
        if not (lo <= a <= b <= hi) and f.kind != DDPM:
            raise ConfigError(f"cfg_interval {cfg.cfg_interval} outside time domain [{lo}, {hi}]")


def sample(model, f: Formulation, cfg: SamplerConfig, n: int, seed: int,
           class_label=None, x_init: Tensor | None = None,
           index_offset: int = 0, aug_label: Tensor | None = None) -> SampleResult:
    """Generate n samples with the configured solver.

    ``seed`` keys per-sample init noise; pass ``x_init`` to integrate from
    explicit start points instead (used by solver-accuracy tests).
    """
    # non-leaky augmentation contract: generation only ever sees the zero label
    assert aug_label is None or not bool(torch.any(torch.as_tensor(aug_label) != 0)), \
        "sampling must use the zero augmentation label"
    _check_pair(f, cfg)
    shape = (n, *model.sample_shape)
    if x_init is not None:
        if tuple(x_init.shape) != shape:
            raise ShapeError(f"x_init shape {tuple(x_init.shape)} != {shape}")
        x = x_init.clone()
    else:
        x = per_sample_noise(shape, seed, index_offset)
        if f.kind == EDM:
            x = x * f.sigma_range[1]
    net = _CountingModel(model, cfg, class_label)

    if cfg.solver == "euler_ddim":
        x, times = _euler_ddim(net, f, cfg, x)
    elif cfg.solver == "heun":
        x, times = _heun(net, f, cfg, x)
    elif cfg.solver == "euler_rf":
        x, times = _euler_rf(net, f, cfg, x)
    else:
        x, times = _rk45(net, f, cfg, x)
    return SampleResult(samples=x, nfe=net.nfe, times=times)


def _euler_ddim(net, f: Formulation, cfg: SamplerConfig, x: Tensor):
    from .formulations import alpha_sigma

    ts = np.unique(np.round(np.linspace(f.T, 1, cfg.steps)))[::-1].astype(np.int64)
    for i, t in enumerate(ts):
        pred = net(x, float(t), unit_time=float(t) / f.T)
        triple = convert_prediction(f, f.prediction_kind, pred, x, float(t))
        if i + 1 < len(ts):
            a_next, s_next = alpha_sigma(f, float(ts[i + 1]))
            x = a_next * triple.x0 + s_next * triple.eps
        else:
            x = triple.x0
    return x, ts.astype(np.float64)


def _heun(net, f: Formulation, cfg: SamplerConfig, x: Tensor):
    sig = edm_sigma_grid(cfg.steps, f.sigma_range[0], f.sigma_range[1], cfg.rho)
    sig = np.append(sig, 0.0)
    for i in range(cfg.steps):
        s_cur, s_next = float(sig[i]), float(sig[i + 1])
        pred = net(x, s_cur)
        x0 = convert_prediction(f, f.prediction_kind, pred, x, s_cur).x0
        d_cur = (x - x0) / s_cur
        x_next = x + (s_next - s_cur) * d_cur
        if s_next > 0:
            pred2 = net(x_next, s_next)
            x0_2 = convert_prediction(f, f.prediction_kind, pred2, x_next, s_next).x0
            d_next = (x_next - x0_2) / s_next
            x = x + (s_next - s_cur) * 0.5 * (d_cur + d_next)
        else:
            x = x_next
    return x, sig


def _euler_rf(net, f: Formulation, cfg: SamplerConfig, x: Tensor):
    ts = np.linspace(1.0, 0.0, cfg.steps + 1)
    if cfg.timestep_shift > 1.0:
        ts = shift_time(ts, cfg.timestep_shift)
    for i in range(cfg.steps):
        t_cur, t_next = float(ts[i]), float(ts[i + 1])
        v = net(x, t_cur, unit_time=t_cur)
        v = convert_prediction(f, f.prediction_kind, v, x, t_cur).v
        x = x + (t_next - t_cur) * v
    return x, ts


def _rk45(net, f: Formulation, cfg: SamplerConfig, x: Tensor):
    # Integrated one sample at a time: adaptive step selection then depends
    # only on that sample, keeping results independent of batch sharding.
    out = torch.empty_like(x)
    for j in range(x.shape[0]):
        xj = x[j : j + 1]
        shape = xj.shape

        def velocity(t: float, y: np.ndarray) -> np.ndarray:
            yt = torch.as_tensor(y, dtype=xj.dtype).reshape(shape)
            # domain guard: solver may probe slightly outside [0, 1]
            t_eval = min(max(t, 0.0), 1.0)
            v = net(yt, t_eval, unit_time=t_eval)
            v = convert_prediction(f, f.prediction_kind, v, yt, t_eval).v
            return v.reshape(-1).numpy()

        sol = solve_ivp(velocity, (1.0, 0.0), xj.reshape(-1).numpy(),
                        method="RK45", rtol=cfg.rtol, atol=cfg.atol)
        if not sol.success:
            raise DomainError(f"rk45 integration failed: {sol.message}")
        out[j] = torch.as_tensor(sol.y[:, -1], dtype=x.dtype).reshape(shape)[0]
    return out, np.array([1.0, 0.0])
