"""Deterministic figure emission with re-derivable sidecar data tables."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError

KINDS = ("loss_curves", "layer_bars", "cka_heatmap", "metric_evolution")


def _sidecar(path: Path, header: list[str], rows: list[list], provenance: dict | None) -> Path:
    side = path.with_suffix(".csv")
    with open(side, "w", newline="") as fh:
        if provenance:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(provenance.items())) + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return side


def emit_plots(report_set, kind: str, out_dir, name: str | None = None,
               provenance: dict | None = None) -> list[Path]:
    """Render one figure (plus its data table) per call; returns written paths."""
    if kind not in KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}")
    if not report_set:
        raise ConfigError("empty report set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name or kind}.png"
    fig, ax = plt.subplots(figsize=(6, 4), dpi=120)

    if kind == "loss_curves":
        # report_set: {label: [metric records]}
        steps = sorted({m["step"] for ms in report_set.values() for m in ms})
        by_label = {}
        for label, ms in report_set.items():
            series = {m["step"]: m["loss_diff"] for m in ms}
            by_label[label] = series
            xs = sorted(series)
            ax.plot(xs, [series[x] for x in xs], label=label, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("denoising loss")
        ax.legend()
        rows = [[s] + [by_label[l].get(s, "") for l in report_set] for s in steps]
        side = _sidecar(path, ["step", *report_set.keys()], rows, provenance)
    elif kind == "layer_bars":
        # report_set: {label: [(layer, metric)]}
        labels = list(report_set)
        layers = sorted({l for rows in report_set.values() for l, _ in rows})
        width = 0.8 / len(labels)
        for i, label in enumerate(labels):
            vals = dict(report_set[label])
            xs = np.arange(len(layers)) + i * width
            ax.bar(xs, [vals.get(l, 0.0) for l in layers], width=width, label=label)
        ax.set_xticks(np.arange(len(layers)) + 0.4 - width / 2)
        ax.set_xticklabels([str(l) for l in layers])
        ax.set_xlabel("layer")
        ax.set_ylabel("probe metric")
        ax.legend()
        rows = [[l] + [dict(report_set[lab]).get(l, "") for lab in labels] for l in layers]
        side = _sidecar(path, ["layer", *labels], rows, provenance)
    elif kind == "cka_heatmap":
        mat = report_set  # CKAMatrix
        im = ax.imshow(mat.values, vmin=0.0, vmax=1.0, cmap="viridis", origin="lower")
        fig.colorbar(im, ax=ax, label="linear CKA")
        ax.set_xticks(range(len(mat.layers)))
        ax.set_xticklabels([str(l) for l in mat.layers])
        ax.set_yticks(range(len(mat.layers)))
        ax.set_yticklabels([str(l) for l in mat.layers])
        ax.set_xlabel(mat.model_ids[1] or "layer")
        ax.set_ylabel(mat.model_ids[0] or "layer")
        rows = [[mat.layers[i]] + [f"{v:.6f}" for v in mat.values[i]] for i in range(len(mat.layers))]
        side = _sidecar(path, ["layer", *[str(l) for l in mat.layers]], rows, provenance)
    else:  # metric_evolution
        # report_set: {label: [(x, y)]}
        for label, pts in report_set.items():
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", markersize=3, label=label, linewidth=1.2)
        ax.set_xlabel("progress")
        ax.set_ylabel("metric")
        ax.legend()
        all_x = sorted({x for pts in report_set.values() for x, _ in pts})
        rows = [[x] + [dict(report_set[l]).get(x, "") for l in report_set] for x in all_x]
        side = _sidecar(path, ["x", *report_set.keys()], rows, provenance)

    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return [path, side]
