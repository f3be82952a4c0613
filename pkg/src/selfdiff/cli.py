"""Command-line surface tying the toolkit into reproducible runs.

Every verb is a pure function of (config, seed, dataset) to files under the
output directory. Layout: <out>/<run-id>/{checkpoints,metrics.jsonl,reports,
plots,config.yaml} with run-id = config-hash + seed.

Exit codes: 0 success, 2 config/schema violation, 3 missing checkpoint,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .archive import load_archive, save_archive
from .config import config_hash, config_to_dict, dump_config, run_config_from_sources
from .errors import ConfigError, NumericError, SelfDiffError, ShapeError, TrainingDiverged
from .plots import emit_plots

EXIT_CONFIG = 2
EXIT_MISSING_CHECKPOINT = 3
EXIT_NUMERIC = 4


def _out_root(args) -> Path:
    root = args.out or os.environ.get("SELFDIFF_OUT", "runs")
    return Path(root)


def _run_config(args):
    cfg = run_config_from_sources(args.config, args.set or [])
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _provenance(cfg) -> dict:
    return {"config_hash": config_hash(cfg), "code_version": __version__}


def _require_checkpoint(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} does not exist")
    return p


def _load_model(path: str, use_ema: bool = True):
    from .training import model_from_checkpoint

    return model_from_checkpoint(_require_checkpoint(path), use_ema=use_ema)


def _dataset_for(cfg):
    from .data import make_dataset

    return make_dataset(cfg.data.name, n=cfg.data.n, seed=cfg.data.seed,
                        image_size=cfg.data.image_size)


def _write_report(run_dir: Path, name: str, payload: dict, cfg) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    reports = run_dir / "reports"
    reports.mkdir(exist_ok=True)
    payload = {**payload, **_provenance(cfg)}
    path = reports / f"{name}.json"
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return path


def cmd_train(args) -> int:
    from .training import train

    cfg = _run_config(args)
    run_id = f"{config_hash(cfg)}-s{cfg.seed}"
    run_dir = _out_root(args) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.yaml")
    result = train(cfg, out_dir=run_dir)
    emit_plots({"train": result.metrics}, "loss_curves", run_dir / "plots",
               provenance=_provenance(cfg))
    final = result.metrics[-1]
    print(f"train ok run={run_id} steps={final['step']} "
          f"loss_diff={final['loss_diff']:.4f} out={run_dir}")
    return 0


def cmd_sample(args) -> int:
    from .samplers import sample

    model, ckpt = _load_model(args.checkpoint, use_ema=not args.student)
    cfg = ckpt.config
    scfg = cfg.sampler
    if args.steps:
        scfg = replace(scfg, steps=args.steps)
    if args.solver:
        scfg = replace(scfg, solver=args.solver)
    result = sample(model, cfg.formulation, scfg, args.n, seed=args.seed or cfg.seed)
    run_dir = Path(args.checkpoint).resolve().parent.parent
    out = run_dir / "samples"
    out.mkdir(parents=True, exist_ok=True)
    arr = result.samples.numpy()
    save_archive(out / "samples.zip", {"samples": arr},
                 {"kind": "samples", "nfe": result.nfe, "solver": scfg.solver,
                  "steps": scfg.steps, **_provenance(cfg)})
    if arr.ndim == 4 and arr.shape[1] in (1, 3):
        _save_grid(arr, out / "grid.png")
    print(f"sample ok n={args.n} solver={scfg.solver} nfe={result.nfe} out={out}")
    return 0


def _save_grid(arr: np.ndarray, path: Path) -> None:
    from PIL import Image

    n = arr.shape[0]
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    c, h, w = arr.shape[1:]
    grid = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    img = np.clip((arr + 1.0) * 127.5, 0, 255).astype(np.uint8)
    for i in range(n):
        r, co = divmod(i, cols)
        tile = img[i].transpose(1, 2, 0)
        if c == 1:
            tile = np.repeat(tile, 3, axis=2)
        grid[r * h:(r + 1) * h, co * w:(co + 1) * w] = tile
    Image.fromarray(grid).save(path)


def cmd_probe(args) -> int:
    from .evaluation import ProbeConfig, default_probe_time, extract_features, linear_probe

    model, ckpt = _load_model(args.checkpoint)
    cfg = ckpt.config
    dataset = _dataset_for(cfg)
    t = args.time if args.time is not None else default_probe_time(cfg.formulation)
    feats, labels = extract_features(model, dataset, t, args.layer, reduce=args.reduce,
                                     seed=args.seed or cfg.seed)
    report = linear_probe(feats, labels, ProbeConfig(epochs=args.epochs),
                          layer=args.layer, timestep=t, checkpoint_id=config_hash(cfg))
    run_dir = Path(args.checkpoint).resolve().parent.parent
    path = _write_report(run_dir, f"probe_l{args.layer}_t{t}", report.to_dict(), cfg)
    print(f"probe ok layer={args.layer} t={t} val_acc={report.val_metric:.4f} report={path}")
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import ProbeConfig, sweep

    model, ckpt = _load_model(args.checkpoint)
    cfg = ckpt.config
    dataset = _dataset_for(cfg)
    layers = [int(x) for x in args.layers.split(",")]
    times = [float(x) for x in args.times.split(",")]
    report = sweep(model, dataset, layers, times, ProbeConfig(epochs=args.epochs),
                   seed=args.seed or cfg.seed, checkpoint_id=config_hash(cfg))
    run_dir = Path(args.checkpoint).resolve().parent.parent
    path = _write_report(run_dir, "sweep", report.to_dict(), cfg)
    emit_plots({"sweep": report.layer_profile(times[0])}, "layer_bars",
               run_dir / "plots", provenance=_provenance(cfg))
    best = report.argmax
    print(f"sweep ok argmax layer={best.layer} t={best.timestep} "
          f"val_acc={best.val_metric:.4f} report={path}")
    return 0


def cmd_dense_probe(args) -> int:
    from .evaluation import ProbeConfig, default_probe_time, dense_probe, extract_dense_features

    model, ckpt = _load_model(args.checkpoint)
    cfg = ckpt.config
    dataset = _dataset_for(cfg)
    t = args.time if args.time is not None else default_probe_time(cfg.formulation)
    layers = [int(x) for x in args.layers.split(",")]
    tokens, dense = extract_dense_features(model, dataset, t, layers, seed=args.seed or cfg.seed)
    report = dense_probe(tokens, dense, ProbeConfig(epochs=args.epochs),
                         layer=layers[0], timestep=t, checkpoint_id=config_hash(cfg))
    run_dir = Path(args.checkpoint).resolve().parent.parent
    path = _write_report(run_dir, "dense_probe", report.to_dict(), cfg)
    print(f"dense-probe ok layers={layers} t={t} miou={report.val_metric:.4f} report={path}")
    return 0


def cmd_profile_layers(args) -> int:
    from .selfcond import profile_layers

    cfg = _run_config(args)
    candidates = [int(x) for x in args.candidates.split(",")]
    seeds = [int(x) for x in args.seeds.split(",")]
    profile = profile_layers(cfg, candidates, args.short_epochs, seeds)
    run_dir = _out_root(args) / f"{config_hash(cfg)}-profile"
    path = _write_report(run_dir, "layer_profile", profile.to_dict(), cfg)
    print("layer  mean_loss")
    for layer, loss in profile.entries:
        print(f"{layer:>5d}  {loss:.6f}")
    print(f"profile-layers ok best={profile.best_layer} report={path}")
    return 0


def cmd_cka(args) -> int:
    from .evaluation import cka_map, default_probe_time

    model_a, ckpt = _load_model(args.checkpoint)
    cfg = ckpt.config
    model_b = None
    ids = (config_hash(cfg), config_hash(cfg))
    if args.checkpoint_b:
        model_b, ckpt_b = _load_model(args.checkpoint_b)
        ids = (config_hash(cfg), config_hash(ckpt_b.config))
    dataset = _dataset_for(cfg)
    t = args.time if args.time is not None else default_probe_time(cfg.formulation)
    layers = [int(x) for x in args.layers.split(",")]
    mat = cka_map(model_a, dataset, t, layers, model_b=model_b,
                  seed=args.seed or cfg.seed, model_ids=ids)
    run_dir = Path(args.checkpoint).resolve().parent.parent
    path = _write_report(run_dir, "cka", mat.to_dict(), cfg)
    emit_plots(mat, "cka_heatmap", run_dir / "plots", provenance=_provenance(cfg))
    print(f"cka ok layers={layers} t={t} report={path}")
    return 0


def cmd_frechet(args) -> int:
    from .evaluation import frechet_from_samples

    arrays_a, _ = load_archive(_require_checkpoint(args.archive_a))
    arrays_b, _ = load_archive(_require_checkpoint(args.archive_b))
    value = frechet_from_samples(arrays_a["samples"], arrays_b["samples"],
                                 embedder=args.embedder)
    print(f"frechet ok distance={value:.6f}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    print(f"provenance chain for {run_dir}")
    cfg_file = run_dir / "config.yaml"
    if cfg_file.exists():
        from .config import config_from_dict, load_config_file
        from .training import RunConfig

        cfg = config_from_dict(RunConfig, load_config_file(cfg_file))
        print(f"  config.yaml  hash={config_hash(cfg)} seed={cfg.seed}")
    for ckpt in sorted((run_dir / "checkpoints").glob("*.zip")) if (run_dir / "checkpoints").exists() else []:
        _, meta = load_archive(ckpt)
        print(f"  checkpoint {ckpt.name}  step={meta['step']} "
              f"config_hash={meta['config_hash']} code={meta['code_version']}")
    reports = run_dir / "reports"
    if reports.exists():
        for rep in sorted(reports.glob("*.json")):
            with open(rep) as fh:
                payload = json.load(fh)
            print(f"  report {rep.name}  config_hash={payload.get('config_hash', '?')} "
                  f"code={payload.get('code_version', '?')}")
    plots_dir = run_dir / "plots"
    if plots_dir.exists():
        for side in sorted(plots_dir.glob("*.csv")):
            with open(side) as fh:
                first = fh.readline().strip()
            print(f"  plot {side.with_suffix('.png').name}  {first.lstrip('# ')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfdiff",
                                     description="desk-scale diffusion toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML run config")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="dotted-key config override")
        p.add_argument("--out", help="output root (default $SELFDIFF_OUT or ./runs)")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="run a training loop")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate samples from a checkpoint")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", type=int, default=16)
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--solver", default="")
    p.add_argument("--student", action="store_true", help="use student weights, not EMA")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("probe", help="linear probe at one (layer, time) cell")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--time", type=float, default=None)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--reduce", default="pooled", choices=("pooled", "cls"))
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("sweep", help="probe a layer x time grid")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layers", required=True, help="comma-separated layer indices")
    p.add_argument("--times", required=True, help="comma-separated times")
    p.add_argument("--epochs", type=int, default=15)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("dense-probe", help="dense linear probing on patch tokens")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layers", required=True)
    p.add_argument("--time", type=float, default=None)
    p.add_argument("--epochs", type=int, default=15)
    p.set_defaults(fn=cmd_dense_probe)

    p = sub.add_parser("profile-layers", help="rank candidate tap layers by short-run loss")
    common(p)
    p.add_argument("--candidates", required=True, help="comma-separated layer indices")
    p.add_argument("--short-epochs", type=int, default=20)
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.set_defaults(fn=cmd_profile_layers)

    p = sub.add_parser("cka", help="layer-pairwise representation similarity")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--checkpoint-b", default="")
    p.add_argument("--layers", required=True)
    p.add_argument("--time", type=float, default=None)
    p.set_defaults(fn=cmd_cka)

    p = sub.add_parser("frechet", help="Frechet distance between two sample archives")
    common(p, config=False)
    p.add_argument("--archive-a", required=True)
    p.add_argument("--archive-b", required=True)
    p.add_argument("--embedder", default="flat")
    p.set_defaults(fn=cmd_frechet)

    p = sub.add_parser("report", help="reconstruct the provenance chain of a run")
    common(p, config=False)
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT
    except (NumericError, TrainingDiverged, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SelfDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
