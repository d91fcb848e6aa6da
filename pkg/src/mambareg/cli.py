"""Command-line surface.

Subcommands: gen-data, train, register, evaluate, bench.
Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, GenConfig, TrainConfig, load_config
from .engine import NumericError, as_tensor, warp3d
from .fields import warp_labels
from .metrics import MetricReport, count_params, dice_score, hd95_labels, neg_jacobian_fraction
from .networks import CheckpointError, load_checkpoint
from .synthdata import (
    DataError,
    VolumeFormatError,
    load_manifest,
    load_pair,
    make_dataset,
    read_volume,
    write_volume,
)


def cmd_gen_data(args):
    cfg = load_config(args.config, GenConfig) if args.config else GenConfig()
    seed = args.seed if args.seed is not None else 0
    try:
        ratios = tuple(int(r) for r in args.ratios.split("/"))
    except ValueError:
        raise ConfigError(f"--ratios must look like 150/10/20, got {args.ratios!r}") from None
    manifest, records = make_dataset(cfg, args.subjects, args.out, seed=seed, ratios=ratios)
    splits = {}
    for r in records:
        splits[r["split"]] = splits.get(r["split"], 0) + 1
    print(f"wrote {len(records)} subjects to {args.out}")
    print("splits: " + ", ".join(f"{k}={v}" for k, v in sorted(splits.items())))
    print(f"manifest: {manifest}")


def cmd_train(args):
    cfg = load_config(args.config, TrainConfig) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = _replace(cfg, seed=args.seed)
    if args.no_feature_extractor:
        cfg = _replace(cfg, use_extractor=False)
    if args.no_grad_surgery:
        cfg = _replace(cfg, grad_surgery=False)
    if args.lambda_c is not None:
        cfg = _replace(cfg, lambda_c=args.lambda_c)
    if args.lambda_s is not None:
        cfg = _replace(cfg, lambda_s=args.lambda_s)
    if args.steps is not None:
        cfg = _replace(cfg, int_steps=args.steps)

    from .train import train

    summary = train(cfg, args.manifest, args.out)
    print(json.dumps(summary, indent=2))


def cmd_register(args):
    model = load_checkpoint(args.checkpoint)
    if args.steps is not None:
        model.cfg = _replace(model.cfg, int_steps=args.steps)
    moving = read_volume(args.moving)
    fixed = read_volume(args.fixed)
    if moving.shape != fixed.shape:
        raise DataError(f"moving {moving.shape} != fixed {fixed.shape}")
    if moving.spacing != fixed.spacing:
        raise DataError(f"spacing mismatch: {moving.spacing} vs {fixed.spacing}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t_all = time.perf_counter()
    t_fwd = time.perf_counter()
    result = model(moving.grid.astype(model.dtype), fixed.grid.astype(model.dtype))
    forward_s = time.perf_counter() - t_fwd
    disp = result["disp"].data.astype(np.float64)

    warped = warp3d(as_tensor(moving.grid[..., None]), as_tensor(disp)).data[..., 0]
    write_volume(out_dir / "warped.vol", _vol_like(warped, moving))
    for c in range(3):
        write_volume(out_dir / f"disp{c}.vol", _vol_like(disp[..., c], moving))
    if args.labels:
        mlab = read_volume(args.labels)
        write_volume(out_dir / "warped_labels.vol", warp_labels(mlab, disp))
    wall_s = time.perf_counter() - t_all
    print(json.dumps({"out": str(out_dir), "forward_s": forward_s, "wall_s": wall_s}))


def cmd_evaluate(args):
    if not args.checkpoint and not args.fields:
        raise ConfigError("evaluate needs --checkpoint or --fields")
    records = [r for r in load_manifest(args.manifest) if r["split"] == args.split]
    if not records:
        raise DataError(f"no records in split {args.split!r}")
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    n_params = count_params(model) if model else 0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    reports = []
    missing = []
    for rec in records:
        try:
            moving, fixed, mlab, flab = load_pair(args.manifest, rec)
        except (OSError, VolumeFormatError) as e:
            missing.append(f"{rec['subject']}: {e}")
            continue
        t0 = time.perf_counter()
        if model is not None:
            result = model(moving.grid.astype(model.dtype), fixed.grid.astype(model.dtype))
            disp = result["disp"].data.astype(np.float64)
        else:
            try:
                disp = np.stack(
                    [read_volume(Path(args.fields) / rec["subject"] / f"disp{c}.vol").grid
                     for c in range(3)], axis=-1).astype(np.float64)
            except (OSError, VolumeFormatError) as e:
                missing.append(f"{rec['subject']}: {e}")
                continue
        hard = warp_labels(mlab, disp)
        wall = time.perf_counter() - t0
        d_per, d_mean = dice_score(hard, flab)
        h_per, h_mean = hd95_labels(hard, flab, spacing=fixed.spacing)
        reports.append(MetricReport(
            pair_id=rec["subject"],
            dice_per_class=d_per, dice_mean_pct=d_mean,
            hd95_per_class=h_per, hd95_mm=h_mean,
            neg_jac_pct=neg_jacobian_fraction(disp),
            param_count=n_params, wall_time_s=wall,
        ))

    from .report import format_metric_table, render_metrics_figure, write_metrics_csv

    if missing:
        print("missing pairs (skipped):", file=sys.stderr)
        for m in missing:
            print(f"  {m}", file=sys.stderr)
    if not reports:
        raise DataError("no pairs could be evaluated")
    csv_path = write_metrics_csv(reports, out_dir / "metrics.csv")
    fig_path = render_metrics_figure(reports, out_dir / "metrics.png")
    print(format_metric_table(reports))
    print(f"csv: {csv_path}\nfigure: {fig_path}")


def run_scan_bench(lengths, runs=10, seed=0, batch=1, width=4, state=8, chunk=64):
    """Median wall times for both scan paths plus the fitted scaling exponent."""
    from .ssm import selective_scan, selective_scan_parallel

    rng = np.random.default_rng(seed)
    rows = []
    for L in lengths:
        if L < 1:
            raise ConfigError(f"bench length must be >= 1, got {L}")
        u = rng.normal(size=(batch, L, width))
        dl = rng.uniform(0.05, 0.5, size=(batch, L, width))
        A = -rng.uniform(0.2, 1.5, size=(width, state))
        Bt = rng.normal(size=(batch, L, state))
        Ct = rng.normal(size=(batch, L, state))
        D = rng.normal(size=(width,))
        seq_t, par_t, diff = [], [], 0.0
        for _ in range(runs):
            t0 = time.perf_counter()
            ys = selective_scan(u, dl, A, Bt, Ct, D)
            seq_t.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            yp = selective_scan_parallel(u, dl, A, Bt, Ct, D, chunk=chunk)
            par_t.append(time.perf_counter() - t0)
            diff = max(diff, float(np.abs(ys.data - yp.data).max()))
        rows.append({"length": int(L), "sequential_s": float(np.median(seq_t)),
                     "parallel_s": float(np.median(par_t)), "max_abs_diff": diff})
    logs = np.log2([r["length"] for r in rows])
    logt = np.log2([r["sequential_s"] for r in rows])
    exponent = float(np.polyfit(logs, logt, 1)[0]) if len(rows) > 1 else float("nan")
    return rows, exponent


def cmd_bench(args):
    try:
        lengths = [int(x) for x in args.lengths.split(",")]
    except ValueError:
        raise ConfigError(f"--lengths must be comma-separated ints, got {args.lengths!r}") from None
    rows, exponent = run_scan_bench(lengths, runs=args.runs,
                                    seed=args.seed if args.seed is not None else 0)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    from .report import render_bench_figure, write_bench_csv

    csv_path = write_bench_csv(rows, out_dir / "bench.csv")
    fig_path = render_bench_figure(rows, exponent, out_dir / "bench.png")
    print(f"{'L':>8} {'sequential s':>14} {'chunked s':>12} {'max |diff|':>12}")
    for r in rows:
        print(f"{r['length']:>8} {r['sequential_s']:>14.6f} {r['parallel_s']:>12.6f} "
              f"{r['max_abs_diff']:>12.3e}")
    worst = max(r["max_abs_diff"] for r in rows)
    print(f"sequential scaling exponent: {exponent:.3f}")
    print(f"max |parallel - sequential|: {worst:.3e}")
    print(f"csv: {csv_path}\nfigure: {fig_path}")
    if worst > 1e-10:
        raise NumericError(f"scan paths diverged: {worst:.3e} > 1e-10")


def _vol_like(grid, ref):
    from .fields import Volume

    return Volume(grid, ref.spacing)


def _replace(cfg, **kw):
    import dataclasses

    return dataclasses.replace(cfg, **kw)


def build_parser():
    p = argparse.ArgumentParser(prog="mambareg",
                                description="Desk-scale multi-modality deformable registration")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic co-registered dataset")
    g.add_argument("--config", help="GenConfig key=value file")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--subjects", type=int, default=18)
    g.add_argument("--ratios", default="15/1/2", help="train/val/test ratio, e.g. 150/10/20")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a registration model")
    t.add_argument("--config", help="TrainConfig key=value file")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-feature-extractor", action="store_true")
    t.add_argument("--no-grad-surgery", action="store_true")
    t.add_argument("--lambda-c", type=float)
    t.add_argument("--lambda-s", type=float)
    t.add_argument("--steps", type=int, help="SVF integration steps")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="register one volume pair")
    r.add_argument("moving")
    r.add_argument("fixed")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--labels", help="moving labels to warp alongside")
    r.add_argument("--steps", type=int, help="SVF integration steps")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="evaluate on a manifest split")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--fields", help="directory of precomputed displacement fields")
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="scan kernel throughput")
    b.add_argument("--lengths", default="1024,2048,4096,8192,16384,32768,65536,131072")
    b.add_argument("--runs", type=int, default=10)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, VolumeFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
