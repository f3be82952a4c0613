"""Diffusion process math for the three model families.

All families share the forward marginal x_t = alpha_t * x0 + sigma_t * eps and
differ in schedules, training-time distributions, and prediction targets:

* ``ddpm`` -- discrete variance-preserving chain, epsilon prediction.
* ``edm``  -- continuous variance-exploding process parameterized by sigma,
  x0 prediction through a preconditioned denoiser wrapper.
* ``rf``   -- rectified flow, linear interpolation on t in [0, 1], velocity
  (eps - x0) prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import torch
from torch import Tensor, nn

from .errors import ConfigError, DomainError, ShapeError, SingularityError

DDPM = "ddpm"
EDM = "edm"
RF = "rf"
KINDS = (DDPM, EDM, RF)

PRED_EPSILON = "epsilon"
PRED_X0 = "x0"
PRED_VELOCITY = "velocity"
PREDICTION_KINDS = (PRED_EPSILON, PRED_X0, PRED_VELOCITY)

_DEFAULT_PREDICTION = {DDPM: PRED_EPSILON, EDM: PRED_X0, RF: PRED_VELOCITY}


@dataclass
class Formulation:
    """Schedule and objective parameters for one diffusion family."""

    kind: str
    T: int = 1000
    beta_range: tuple[float, float] = (1e-4, 0.02)
    sigma_range: tuple[float, float] = (0.002, 80.0)
    p_mean: float = -1.2
    p_std: float = 1.2
    t_sampler: str = "uniform"  # rf only: uniform | lognorm
    prediction_kind: str = ""
    sigma_data: float = 0.5  # edm preconditioning constant

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown formulation kind {self.kind!r}")
        if not self.prediction_kind:
            self.prediction_kind = _DEFAULT_PREDICTION[self.kind]
        if self.prediction_kind not in PREDICTION_KINDS:
            raise ConfigError(f"unknown prediction kind {self.prediction_kind!r}")
        if self.kind == DDPM and self.T < 1:
            raise ConfigError("ddpm horizon T must be a positive integer")
        if self.kind == EDM and not (0 < self.sigma_range[0] < self.sigma_range[1]):
            raise ConfigError(f"invalid sigma_range {self.sigma_range}")
        if self.t_sampler not in ("uniform", "lognorm"):
            raise ConfigError(f"unknown t_sampler {self.t_sampler!r}")

    # -- time domain ------------------------------------------------------

    def time_domain(self) -> tuple[float, float]:
        if self.kind == DDPM:
            return (1.0, float(self.T))
        if self.kind == EDM:
            return self.sigma_range
        return (0.0, 1.0)

    def check_time(self, t: Tensor) -> None:
        lo, hi = self.time_domain()
        slack = 1e-9 * max(1.0, hi)
        if bool((t < lo - slack).any() or (t > hi + slack).any()):
            raise DomainError(
                f"time {t.min().item()}..{t.max().item()} outside {self.kind} domain [{lo}, {hi}]"
            )
        if self.kind == DDPM and not torch.equal(t, t.round()):
            raise DomainError("ddpm times must be integers in 1..T")


@lru_cache(maxsize=8)
def _ddpm_alpha_bar(T: int, beta_lo: float, beta_hi: float) -> Tensor:
    betas = torch.linspace(beta_lo, beta_hi, T, dtype=torch.float64)
    return torch.cumprod(1.0 - betas, dim=0)


def alpha_sigma(f: Formulation, t):
    """Forward-marginal coefficients (alpha_t, sigma_t) at time t.

    ``t`` may be a python scalar or a tensor; scalars come back as floats,
    tensors as tensors of the same shape.
    """
    scalar_in = not isinstance(t, Tensor)
    tt = torch.as_tensor(t, dtype=torch.float64)
    f.check_time(tt)
    if f.kind == DDPM:
        abar = _ddpm_alpha_bar(f.T, *f.beta_range)
        a2 = abar[tt.long() - 1]
        alpha = torch.sqrt(a2)
        sigma = torch.sqrt(1.0 - a2)
    elif f.kind == EDM:
        alpha = torch.ones_like(tt)
        sigma = tt.clone()
    else:  # rf
        alpha = 1.0 - tt
        sigma = tt.clone()
    if scalar_in:
        return float(alpha), float(sigma)
    return alpha.to(torch.get_default_dtype()), sigma.to(torch.get_default_dtype())


def sample_training_time(f: Formulation, rng: torch.Generator, n: int = 1) -> Tensor:
    """Draw n training times from the family's noise-level distribution."""
    if f.kind == DDPM:
        return torch.randint(1, f.T + 1, (n,), generator=rng).to(torch.get_default_dtype())
    z = torch.randn(n, generator=rng)
    if f.kind == EDM:
        sigma = torch.exp(f.p_mean + f.p_std * z)
        return sigma.clamp(*f.sigma_range)
    if f.t_sampler == "lognorm":
        return torch.sigmoid(z)  # logistic-normal on (0, 1)
    return torch.rand(n, generator=rng)


def _bcast(v: Tensor, like: Tensor) -> Tensor:
    """Reshape a per-sample vector for broadcasting against a batch array."""
    if v.ndim == 0:
        return v.to(like.dtype)
    if v.shape[0] != like.shape[0]:
        raise ShapeError(f"time batch {v.shape[0]} does not match data batch {like.shape[0]}")
    return v.to(like.dtype).reshape(v.shape[0], *([1] * (like.ndim - 1)))


def perturb(f: Formulation, x0: Tensor, t, eps: Tensor) -> Tensor:
    """Forward perturbation alpha_t * x0 + sigma_t * eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    tt = torch.as_tensor(t, dtype=torch.float64)
    alpha, sigma = alpha_sigma(f, tt)
    return _bcast(alpha, x0) * x0 + _bcast(sigma, x0) * eps


def training_target(f: Formulation, x0: Tensor, eps: Tensor, t=None) -> Tensor:
    """Regression target matching the formulation's prediction kind."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    if f.prediction_kind == PRED_EPSILON:
        return eps
    if f.prediction_kind == PRED_X0:
        return x0
    return eps - x0


class PredictionTriple(NamedTuple):
    x0: Tensor
    eps: Tensor
    v: Tensor


def convert_prediction(f: Formulation, pred_kind: str, pred: Tensor, x_t: Tensor, t) -> PredictionTriple:
    """Recover all three prediction representations from one of them.

    The triple satisfies x_t = alpha*x0 + sigma*eps and v = eps - x0.
    """
    if pred.shape != x_t.shape:
        raise ShapeError(f"pred shape {tuple(pred.shape)} != x_t shape {tuple(x_t.shape)}")
    tt = torch.as_tensor(t, dtype=torch.float64)
    alpha_s, sigma_s = alpha_sigma(f, tt)
    alpha = _bcast(torch.as_tensor(alpha_s), x_t)
    sigma = _bcast(torch.as_tensor(sigma_s), x_t)
    if pred_kind == PRED_EPSILON:
        if bool((torch.as_tensor(alpha_s) == 0).any()):
            raise SingularityError("alpha_t = 0: x0 unrecoverable from an epsilon prediction")
        eps = pred
        x0 = (x_t - sigma * eps) / alpha
    elif pred_kind == PRED_X0:
        if bool((torch.as_tensor(sigma_s) == 0).any()):
            raise SingularityError("sigma_t = 0: eps unrecoverable from an x0 prediction")
        x0 = pred
        eps = (x_t - alpha * x0) / sigma
    elif pred_kind == PRED_VELOCITY:
        den = alpha + sigma
        if bool((den == 0).any()):
            raise SingularityError("alpha_t + sigma_t = 0: velocity conversion undefined")
        x0 = (x_t - sigma * pred) / den
        eps = x0 + pred
    else:
        raise ConfigError(f"unknown prediction kind {pred_kind!r}")
    return PredictionTriple(x0=x0, eps=eps, v=eps - x0)


class UncertaintyHead(nn.Module):
    """Learned per-noise-level log-variance u(sigma) for uncertainty weighting.

    One hidden layer over a Fourier embedding of log(sigma); the output layer
    is zero-initialized so the weighted loss starts exactly at the plain MSE.
    """

    def __init__(self, n_freqs: int = 8, hidden: int = 64):
        super().__init__()
        self.register_buffer("freqs", 2.0 ** torch.arange(n_freqs, dtype=torch.float32))
        self.net = nn.Sequential(nn.Linear(2 * n_freqs, hidden), nn.SiLU(), nn.Linear(hidden, 1))
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, sigma_or_t: Tensor) -> Tensor:
        z = torch.log(sigma_or_t.clamp_min(1e-8)).reshape(-1, 1).to(self.freqs.dtype)
        feats = torch.cat([torch.sin(z * self.freqs), torch.cos(z * self.freqs)], dim=-1)
        return self.net(feats).squeeze(-1)


def diffusion_loss(
    pred: Tensor,
    target: Tensor,
    weighting: str = "none",
    sigma_or_t: Tensor | None = None,
    uncertainty: UncertaintyHead | None = None,
) -> Tensor:
    """Denoising regression loss, optionally with learned uncertainty weighting."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if weighting == "none":
        return torch.mean((pred - target) ** 2)
    if weighting == "uncertainty":
        if uncertainty is None or sigma_or_t is None:
            raise ConfigError("uncertainty weighting needs a head and per-sample noise levels")
        per_sample = torch.mean((pred - target) ** 2, dim=tuple(range(1, pred.ndim)))
        u = uncertainty(torch.as_tensor(sigma_or_t, dtype=pred.dtype))
        if u.shape != per_sample.shape:
            raise ShapeError("noise-level batch does not match prediction batch")
        return torch.mean(per_sample / torch.exp(u) + u)
    raise ConfigError(f"unknown loss weighting {weighting!r}")


def edm_preconditioning(sigma: Tensor, sigma_data: float) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(c_skip, c_out, c_in, c_noise) of the preconditioned denoiser."""
    sd2 = sigma_data**2
    denom = sigma**2 + sd2
    c_skip = sd2 / denom
    c_out = sigma * sigma_data / torch.sqrt(denom)
    c_in = 1.0 / torch.sqrt(denom)
    c_noise = torch.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


class DiffusionModel(nn.Module):
    """Formulation-aware wrapper around a backbone network.

    Handles the conditioning-value convention per family and, for edm, the
    standard input/output preconditioning so the wrapped model always returns
    its formulation's native prediction (epsilon / denoised x0 / velocity).
    """

    def __init__(self, backbone: nn.Module, formulation: Formulation):
        super().__init__()
        self.backbone = backbone
        self.formulation = formulation

    @property
    def prediction_kind(self) -> str:
        return self.formulation.prediction_kind

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.backbone.sample_shape

    def _time_value(self, t: Tensor) -> Tensor:
        # Map each family's time variable onto a well-spread sinusoid argument.
        if self.formulation.kind == DDPM:
            return t
        if self.formulation.kind == EDM:
            return 250.0 * torch.log(t) / 4.0
        return 1000.0 * t

    def predict(self, x_t: Tensor, t, class_label=None, aug_label=None, taps=()):
        tt = torch.as_tensor(t, dtype=x_t.dtype)
        if tt.ndim == 0:
            tt = tt.expand(x_t.shape[0]).clone()
        if self.formulation.kind == EDM:
            sigma = _bcast(tt, x_t)
            c_skip, c_out, c_in, _ = edm_preconditioning(sigma, self.formulation.sigma_data)
            raw, tap_out = self.backbone(
                c_in * x_t, self._time_value(tt), class_label=class_label,
                aug_label=aug_label, taps=taps,
            )
            return c_skip * x_t + c_out * raw, tap_out
        return self.backbone(
            x_t, self._time_value(tt), class_label=class_label, aug_label=aug_label, taps=taps,
        )

    def forward(self, x_t: Tensor, t, class_label=None, aug_label=None):
        pred, _ = self.predict(x_t, t, class_label=class_label, aug_label=aug_label)
        return pred


def make_formulation(kind: str, **overrides) -> Formulation:
    """Convenience constructor with per-family defaults."""
    return Formulation(kind=kind, **overrides)
