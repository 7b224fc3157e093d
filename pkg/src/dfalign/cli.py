"""Command-line surface: data generation, training, evaluation, diffusion
verification, similarity export, and the ablation harness.

Every command reads one JSON config (unknown keys rejected) and stamps the
canonical config hash into its outputs.  Errors print a single JSON line to
stderr; exit codes: 0 success, 2 config error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .config import (RunConfig, apply_overrides, config_hash, config_to_dict,
                     load_config)
from .data import generate_dataset, load_dataset, save_dataset
from .diffusion import mc_verify
from .errors import ConfigError, DFAlignError, ParameterError
from .schedule import make_schedule


def _dump_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    train, test, split = generate_dataset(cfg.data)
    save_dataset(args.out, train, test, split, config_hash(cfg))
    print(f"wrote {len(train)} train / {len(test)} test videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_videos, _, split = load_dataset(args.data)
    seed = cfg.train.seeds[0]
    model, reports = pipeline.train_model(cfg, train_videos, split, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.save_checkpoint(out / "checkpoint.ckpt", model, config_hash(cfg))
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for epoch, report in enumerate(reports):
            row = {"epoch": epoch, **report.as_dict(),
                   "config_hash": config_hash(cfg), "seed": seed}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"trained {cfg.train.epochs} epochs (seed {seed}); "
          f"checkpoint at {out / 'checkpoint.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _, test_videos, split = load_dataset(args.data)
    model = pipeline.load_model(cfg, args.ckpt)
    metrics = pipeline.evaluate_model(cfg, model, test_videos, split,
                                      cfg.train.seeds[0])
    _dump_json(Path(args.out), metrics)
    print(f"avg mAP {metrics['avg_map']:.4f} -> {args.out}")
    return 0


def cmd_verify_diffusion(args) -> int:
    cfg = load_config(args.config)
    if cfg.diffusion.steps < 1:
        raise ConfigError("verify-diffusion needs diffusion.steps >= 1")
    sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.gamma_min,
                          cfg.diffusion.sigma, cfg.diffusion.shape)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.data.seed, 23)))
    probe = np.random.default_rng(cfg.data.seed)
    d = cfg.model.d_model
    h_f = probe.standard_normal(d)
    h_v = h_f + probe.standard_normal(d)
    report = mc_verify(sched, h_v, h_f, n_samples=args.samples, rng=rng,
                       paper_literal=cfg.diffusion.paper_literal_forward)
    report["config_hash"] = config_hash(cfg)
    _dump_json(Path(args.out), report)
    status = "all checks passed" if report["all_pass"] else "FAILURES"
    print(f"verify-diffusion: {status} "
          f"({len(report['rows'])} checks) -> {args.out}")
    return 0


def cmd_export_heatmap(args) -> int:
    cfg = load_config(args.config)
    train_videos, test_videos, split = load_dataset(args.data)
    videos = {v.id: v for v in train_videos + test_videos}
    if args.video_id not in videos:
        raise ConfigError(f"video id '{args.video_id}' not in dataset")
    model = pipeline.load_model(cfg, args.ckpt)
    data = pipeline.heatmap_data(cfg, model, videos[args.video_id], split,
                                 cfg.train.seeds[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    class_path = out / f"{args.video_id}_class_sim.csv"
    step_path = out / f"{args.video_id}_step_sim.csv"
    np.savetxt(class_path, data["class_sim"], delimiter=",", fmt="%.10g",
               header=",".join(data["class_labels"]), comments="")
    np.savetxt(step_path, data["step_sim"], delimiter=",", fmt="%.10g",
               header=",".join(data["step_labels"]), comments="")
    print(f"wrote {class_path} and {step_path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    try:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read grid file {args.grid}: {exc}") from exc
    if not isinstance(grid, dict) or "axes" not in grid:
        raise ConfigError("grid file must be an object with an 'axes' mapping")
    axes = grid["axes"]
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("'axes' must be a nonempty mapping of config keys to lists")

    cells = [{}]
    for key, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axis '{key}' must map to a nonempty list")
        cells = [dict(cell, **{key: v}) for cell in cells for v in values]

    rows = []
    for cell in cells:
        cell_cfg = apply_overrides(cfg, cell)
        summary = pipeline.run_seeds(cell_cfg)
        label = ",".join(f"{k}={v}" for k, v in cell.items())
        rows.append({"cell": label, "overrides": cell, **summary})
        print(f"{label:50s} avg mAP {summary['avg_map_mean']:.4f} "
              f"+/- {summary['avg_map_std']:.4f} "
              f"(eval wall {summary['eval_wall_mean_s']:.2f}s)")
    _dump_json(Path(args.out), {"config_hash": config_hash(cfg), "rows": rows})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfalign",
        description="Residual background-suppress diffusion detection lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-diffusion",
                       help="Monte-Carlo check of the diffusion algebra")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--samples", type=int, default=100_000,
                   help="Monte-Carlo sample count")
    p.set_defaults(func=cmd_verify_diffusion)

    p = sub.add_parser("export-heatmap",
                       help="CSV similarity matrices for one video")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--video-id", required=True, help="video id to export")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_heatmap)

    p = sub.add_parser("ablate", help="run a config grid and tabulate avg mAP")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--grid", required=True, help="JSON grid file with 'axes'")
    p.add_argument("--out", required=True, help="table JSON path")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except DFAlignError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
