"""Bundled synthetic datasets; CI never downloads anything.

``shapes16`` is a two-class image set with strong class-correlated global
structure (warm filled disks vs. cool crosses on tinted backgrounds) plus
per-pixel masks usable as dense labels. ``gaussian2d`` provides points from a
known Gaussian for sampler accuracy checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError


@dataclass
class Dataset:
    images: Tensor  # (N, C, H, W), values in [-1, 1]
    labels: Tensor  # (N,) long
    dense_labels: Tensor | None = None  # (N, H, W) long, 0 = background
    n_classes: int = 2

    def __len__(self) -> int:
        return self.images.shape[0]

    def class_mean_direction(self) -> Tensor:
        """Difference of per-class mean images, flattened; used to plant signal."""
        flat = self.images.reshape(len(self), -1)
        means = [flat[self.labels == c].mean(dim=0) for c in range(self.n_classes)]
        return means[1] - means[0]


def make_shapes16(n: int = 512, seed: int = 0, image_size: int = 16) -> Dataset:
    rng = np.random.default_rng(seed)
    s = image_size
    images = np.zeros((n, 3, s, s), dtype=np.float32)
    dense = np.zeros((n, s, s), dtype=np.int64)
    labels = rng.integers(0, 2, size=n)
    yy, xx = np.mgrid[0:s, 0:s]
    for i in range(n):
        cls = int(labels[i])
        cy, cx = rng.integers(s // 2 - 2, s // 2 + 3, size=2)
        if cls == 0:
            # warm filled disk on a dark warm-tinted background
            radius = s / 4 + rng.uniform(-1.0, 1.0)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
            bg = np.array([-0.55, -0.75, -0.85], dtype=np.float32)
            fg = np.array([0.85, 0.15, -0.35], dtype=np.float32)
        else:
            # cool cross on a dark cool-tinted background
            half = int(s / 4 + rng.integers(-1, 2))
            width = 2
            mask = (np.abs(yy - cy) < width) & (np.abs(xx - cx) <= half)
            mask |= (np.abs(xx - cx) < width) & (np.abs(yy - cy) <= half)
            bg = np.array([-0.85, -0.75, -0.55], dtype=np.float32)
            fg = np.array([-0.35, 0.25, 0.85], dtype=np.float32)
        img = np.broadcast_to(bg[:, None, None], (3, s, s)).copy()
        img[:, mask] = fg[:, None] + rng.normal(0, 0.05, size=(3, mask.sum())).astype(np.float32)
        img += rng.normal(0, 0.04, size=(3, s, s)).astype(np.float32)
        images[i] = np.clip(img, -1.0, 1.0)
        dense[i][mask] = cls + 1
    return Dataset(
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels.astype(np.int64)),
        dense_labels=torch.from_numpy(dense),
        n_classes=2,
    )


def make_gaussian2d(n: int = 4096, seed: int = 0,
                    mean=(1.0, -0.5), cov=((0.5, 0.2), (0.2, 0.3))) -> Tensor:
    rng = np.random.default_rng(seed)
    pts = rng.multivariate_normal(np.asarray(mean, dtype=np.float64),
                                  np.asarray(cov, dtype=np.float64), size=n)
    return torch.from_numpy(pts.astype(np.float32))


DATASETS = {"shapes16": make_shapes16}


def make_dataset(name: str, n: int, seed: int, image_size: int = 16) -> Dataset:
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; available: {sorted(DATASETS)}")
    return DATASETS[name](n=n, seed=seed, image_size=image_size)
