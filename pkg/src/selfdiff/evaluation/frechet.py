"""Frechet distance between Gaussian fits, with a pluggable embedder."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError, ShapeError

PSD_TOL = 1e-8


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("features must be (n, d)")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False)
    return mu, np.atleast_2d(cov)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition with negative clipping."""
    sym = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -PSD_TOL * max(1.0, abs(vals.max())):
        raise NumericError(f"matrix not PSD within tolerance (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """||mu1 - mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}).

    tr((C1 C2)^{1/2}) is evaluated as tr((C1^{1/2} C2 C1^{1/2})^{1/2}), which
    is symmetric PSD and safe for an eigendecomposition square root.
    """
    mu1 = np.asarray(mu1, dtype=np.float64).ravel()
    mu2 = np.asarray(mu2, dtype=np.float64).ravel()
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape[0] != mu1.shape[0]:
        raise ShapeError("mean/covariance dimensions do not match")
    for cov in (cov1, cov2):
        if not np.allclose(cov, cov.T, atol=1e-6 * max(1.0, np.abs(cov).max())):
            raise NumericError("covariance not symmetric within tolerance")
    a = _sqrtm_psd(cov1)
    inner = _sqrtm_psd(a @ cov2 @ a)
    dist = float(np.dot(mu1 - mu2, mu1 - mu2) + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(inner))
    return max(dist, 0.0)  # numerical cleanup


EMBEDDERS = {
    "flat": lambda arr: np.asarray(arr, dtype=np.float64).reshape(len(arr), -1),
}


def frechet_from_samples(samples_a, samples_b, embedder: str = "flat") -> float:
    """Fit Gaussians to embedded sample sets and return their Frechet distance."""
    if embedder not in EMBEDDERS:
        raise ShapeError(f"unknown embedder {embedder!r}; available: {sorted(EMBEDDERS)}")
    emb = EMBEDDERS[embedder]
    mu1, cov1 = gaussian_stats(emb(samples_a))
    mu2, cov2 = gaussian_stats(emb(samples_b))
    return frechet_distance(mu1, cov1, mu2, cov2)
