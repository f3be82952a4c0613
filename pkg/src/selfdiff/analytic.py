"""Perfect analytic predictors for Gaussian data.

When the data distribution is N(mean, cov), the posterior mean E[x0 | x_t] is
available in closed form for every formulation, which makes these models exact
oracles for validating solver order and terminal statistics: the probability
flow is affine, and its exact terminal map is the monotone affine transport
between the start marginal and the data Gaussian (computed per eigendirection
of cov).
"""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import ConfigError
from .formulations import Formulation, alpha_sigma


class AnalyticGaussianModel:
    """Drop-in model: .predict returns the formulation's native prediction."""

    def __init__(self, formulation: Formulation, mean: Tensor, cov: Tensor):
        self.formulation = formulation
        self.mean = torch.as_tensor(mean, dtype=torch.float64).reshape(-1)
        cov = torch.as_tensor(cov, dtype=torch.float64)
        if cov.ndim == 0:
            cov = cov[None, None]
        if cov.shape != (self.mean.numel(), self.mean.numel()):
            raise ConfigError("cov must be (d, d) matching the mean")
        lam, u = torch.linalg.eigh(cov)
        self.lam = lam.clamp_min(0.0)
        self.u = u

    @property
    def prediction_kind(self) -> str:
        return self.formulation.prediction_kind

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return (self.mean.numel(),)

    def posterior_x0(self, x_t: Tensor, t: float) -> Tensor:
        alpha, sigma = alpha_sigma(self.formulation, float(t))
        x = x_t.to(torch.float64)
        gain = alpha * self.lam / (alpha**2 * self.lam + sigma**2)
        centered = (x - alpha * self.mean) @ self.u
        return self.mean + (centered * gain) @ self.u.T

    def predict(self, x_t: Tensor, t, class_label=None, aug_label=None, taps=()):
        t = float(torch.as_tensor(t).reshape(-1)[0])
        alpha, sigma = alpha_sigma(self.formulation, t)
        x = x_t.to(torch.float64)
        centered = (x - alpha * self.mean) @ self.u
        denom = alpha**2 * self.lam + sigma**2
        x0 = self.mean + (centered * (alpha * self.lam / denom)) @ self.u.T
        # eps via sigma * centered / denom: stable as sigma -> 0 (no 1/sigma)
        eps = (centered * (sigma / denom)) @ self.u.T
        kind = self.prediction_kind
        pred = {"x0": x0, "epsilon": eps, "velocity": eps - x0}[kind]
        return pred.to(x_t.dtype), {}

    def exact_terminal_map(self, x_start: Tensor, t_start: float) -> Tensor:
        """Exact probability-flow endpoint for points drawn at time t_start."""
        alpha, sigma = alpha_sigma(self.formulation, float(t_start))
        s = torch.sqrt(alpha**2 * self.lam + sigma**2)
        gain = torch.sqrt(self.lam) / s
        centered = (x_start.to(torch.float64) - alpha * self.mean) @ self.u
        return (self.mean + (centered * gain) @ self.u.T).to(x_start.dtype)
