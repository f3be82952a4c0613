"""Linear centered kernel alignment between layer representations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from ..errors import NumericError, ShapeError


def linear_cka(x, y) -> float:
    """||Y_c^T X_c||_F^2 / (||X_c^T X_c||_F ||Y_c^T Y_c||_F), columns centered.

    Invariant to orthogonal transforms and isotropic scaling; 1 for X with
    itself; undefined (raises) for zero-variance inputs.
    """
    x = torch.as_tensor(x, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError("linear_cka expects (n, d) matrices")
    if x.shape[0] != y.shape[0]:
        raise ShapeError("feature matrices must cover the same examples")
    if x.shape[0] < 2:
        raise ShapeError("need at least two examples")
    xc = x - x.mean(dim=0, keepdim=True)
    yc = y - y.mean(dim=0, keepdim=True)
    xx = torch.linalg.norm(xc.T @ xc)
    yy = torch.linalg.norm(yc.T @ yc)
    if float(xx) == 0.0 or float(yy) == 0.0:
        raise NumericError("similarity undefined for zero-variance features")
    return float(torch.linalg.norm(yc.T @ xc) ** 2 / (xx * yy))


@dataclass
class CKAMatrix:
    values: np.ndarray  # (L, L), entries in [0, 1]
    layers: list[int]
    timestep: float
    model_ids: tuple[str, str] = ("", "")

    @property
    def intra_model(self) -> bool:
        return self.model_ids[0] == self.model_ids[1]

    def adjacent_similarities(self) -> list[float]:
        """Superdiagonal: similarity of each layer to the next."""
        return [float(self.values[i, i + 1]) for i in range(len(self.layers) - 1)]

    def to_dict(self) -> dict:
        return {
            "values": self.values.tolist(), "layers": self.layers,
            "timestep": self.timestep, "model_ids": list(self.model_ids),
        }


def cka_map(model_a, dataset, t: float, layers, model_b=None, seed: int = 0,
            model_ids: tuple[str, str] | None = None) -> CKAMatrix:
    """Pairwise linear CKA over tapped, pooled features.

    With one model this is the (symmetric, unit-diagonal) intra-model map;
    with two, cell (i, j) compares model A's layer i to model B's layer j.
    """
    from .features import extract_features

    layers = list(layers)
    feats_a = [extract_features(model_a, dataset, t, l, reduce="pooled", seed=seed)[0] for l in layers]
    feats_b = feats_a if model_b is None else [
        extract_features(model_b, dataset, t, l, reduce="pooled", seed=seed)[0] for l in layers
    ]
    n = len(layers)
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if model_b is None and j < i:
                values[i, j] = values[j, i]
            else:
                values[i, j] = linear_cka(feats_a[i], feats_b[j])
    ids = model_ids if model_ids is not None else ("model_a", "model_a" if model_b is None else "model_b")
    return CKAMatrix(values=values, layers=layers, timestep=float(t), model_ids=ids)
