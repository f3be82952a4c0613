"""Frozen-feature extraction from checkpoints at a fixed (time, layer) cell."""

from __future__ import annotations

import torch
from torch import Tensor

from ..data import Dataset
from ..errors import ConfigError
from ..formulations import DDPM, EDM, Formulation, perturb
from ..samplers import per_sample_noise
from ..selfcond import pool_feature

REDUCES = ("pooled", "tokens", "cls")


def default_probe_time(f: Formulation) -> float:
    """Per-family probing time defaults (discrete step, sigma, or unit time)."""
    if f.kind == DDPM:
        return 11.0
    if f.kind == EDM:
        return 0.06
    return 0.25


def extract_features(model, dataset: Dataset, t: float, layer: int, reduce: str = "pooled",
                     seed: int = 0, batch_size: int = 128) -> tuple[Tensor, Tensor]:
    """One feature row (or token stack) per image, with fixed per-image noise.

    The perturbation noise for image i is keyed by (seed, i), so repeated
    extractions are deterministic and probing results reproducible.
    """
    if reduce not in REDUCES:
        raise ConfigError(f"unknown reduce {reduce!r}")
    model.eval()
    out = []
    n = len(dataset)
    for start in range(0, n, batch_size):
        x0 = dataset.images[start : start + batch_size]
        eps = per_sample_noise(tuple(x0.shape), seed, index_offset=start)
        tt = torch.full((x0.shape[0],), float(t))
        xt = perturb(model.formulation, x0, tt, eps)
        with torch.no_grad():
            _, taps = model.predict(xt, tt, taps=(layer,))
        tap = taps[layer]
        if reduce == "pooled":
            out.append(pool_feature(tap))
        elif reduce == "cls":
            out.append(model.backbone.summary_state(tap))
        else:
            x = tap.tensor
            if x.ndim == 3 and tap.token_layout is not None:
                x = x[:, tap.token_layout.patch_slice]
            elif x.ndim == 4:  # map -> token grid
                x = x.flatten(2).transpose(1, 2)
            out.append(x)
    return torch.cat(out), dataset.labels.clone()


def extract_dense_features(model, dataset: Dataset, t: float, layers, seed: int = 0,
                           batch_size: int = 128) -> tuple[Tensor, Tensor]:
    """Patch tokens from several layers, concatenated along the channel axis."""
    stacks = []
    for layer in layers:
        tokens, _ = extract_features(model, dataset, t, layer, reduce="tokens",
                                     seed=seed, batch_size=batch_size)
        stacks.append(tokens)
    if dataset.dense_labels is None:
        raise ConfigError("dataset has no dense labels")
    return torch.cat(stacks, dim=-1), dataset.dense_labels.clone()
