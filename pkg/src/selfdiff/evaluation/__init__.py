"""Representation and sample-quality diagnostics."""

from .cka import CKAMatrix, cka_map, linear_cka
from .features import default_probe_time, extract_dense_features, extract_features
from .frechet import frechet_distance, frechet_from_samples, gaussian_stats
from .probes import (
    ProbeConfig,
    ProbeReport,
    SweepReport,
    dense_probe,
    linear_probe,
    mean_iou,
    sweep,
)

__all__ = [
    "CKAMatrix",
    "ProbeConfig",
    "ProbeReport",
    "SweepReport",
    "cka_map",
    "default_probe_time",
    "dense_probe",
    "extract_dense_features",
    "extract_features",
    "frechet_distance",
    "frechet_from_samples",
    "gaussian_stats",
    "linear_cka",
    "linear_probe",
    "mean_iou",
    "sweep",
]
