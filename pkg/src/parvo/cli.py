"""Command-line front end: leak, attack, sweep, ablate, metrics, verify-report."""

from __future__ import annotations

import argparse
import os
import sys

from . import data as dio
from . import experiments as exp
from .metrics import psnr, ssim


def _resolve_seed(args, cfg):
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    elif "PARVO_SEED" in os.environ:
        cfg["seed"] = int(os.environ["PARVO_SEED"])
    return cfg


def _load_cfg(args):
    cfg = exp.load_config(args.config)
    if getattr(args, "out", None):
        cfg["out_dir"] = args.out
    return _resolve_seed(args, cfg)


def _add_common(p, jobs=True):
    p.add_argument("--config", help="JSON experiment config (defaults apply)")
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.add_argument("--seed", type=int, help="seed override (else config, else PARVO_SEED)")
    if jobs:
        p.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")


def _read_any_image(path):
    if str(path).endswith(".pgm"):
        return dio.read_pgm(path)
    return dio.read_image(path)


def cmd_leak(args):
    cfg = _load_cfg(args)
    model_path, leak_path = exp.make_leak(cfg, cfg["out_dir"], index=args.index)
    print("wrote %s and %s" % (model_path, leak_path))
    return 0


def cmd_attack(args):
    cfg = _load_cfg(args)
    os.makedirs(cfg["out_dir"], exist_ok=True)
    report = exp.run_attack(cfg, out_dir=cfg["out_dir"], jobs=args.jobs)
    exp.write_report(report, cfg["out_dir"])
    agg = report.aggregates
    print(
        "attack: %d runs, mean psnr %.2f dB, convergence rate %.2f, label accuracy %.2f"
        % (agg["runs"], agg["mean_psnr_db"], agg["convergence_rate"], agg["label_accuracy"])
    )
    return 0


def cmd_sweep(args):
    cfg = _load_cfg(args)
    structures = args.structures.split(",") if args.structures else None
    report = exp.run_sweep(cfg, structures=structures, out_dir=cfg["out_dir"], jobs=args.jobs)
    exp.write_report(report, cfg["out_dir"])
    for row in report.rows:
        print(
            "%-6s conv_prob=%.2f psnr_ratio=%.1f"
            % (row["structure"], row["conv_prob"], row["psnr_ratio"])
        )
    return 0


def cmd_ablate(args):
    cfg = _load_cfg(args)
    report = exp.run_ablation(cfg, out_dir=cfg["out_dir"], jobs=args.jobs)
    exp.write_report(report, cfg["out_dir"])
    agg = report.aggregates
    print(
        "ablation mean psnr: raw %.3f | no-label %.3f | full %.3f"
        % (agg["mean_psnr_db_raw"], agg["mean_psnr_db_no_label"], agg["mean_psnr_db_full"])
    )
    return 0


def cmd_metrics(args):
    ref = _read_any_image(args.reference)
    test = _read_any_image(args.test)
    if ref.shape != test.shape:
        if not args.resize:
            print(
                "error: image sizes differ (%s vs %s); pass --resize to compare anyway"
                % (ref.shape, test.shape),
                file=sys.stderr,
            )
            return 2
        test = dio.resize_bilinear(test, ref.shape[-2], ref.shape[-1])
    print("psnr=%.2f ssim=%.4f" % (psnr(ref, test), ssim(ref, test)))
    return 0


def cmd_verify_report(args):
    ok = exp.verify_report(args.dir)
    print("report aggregates %s" % ("verified" if ok else "MISMATCH"))
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="parvo",
        description="Gradient-inversion attack toolkit for PEFT-tuned multimodal classifiers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("leak", help="simulate a victim client step; write model and leak files")
    _add_common(p, jobs=False)
    p.add_argument("--index", type=int, default=0, help="run index to simulate")
    p.set_defaults(func=cmd_leak)

    p = sub.add_parser("attack", help="run a reconstruction batch")
    _add_common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="sweep image-encoder structures")
    _add_common(p)
    p.add_argument("--structures", help="comma-separated subset, e.g. Conv2,Res1")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run the three-arm ablation")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two image files")
    p.add_argument("reference")
    p.add_argument("test")
    p.add_argument("--resize", action="store_true", help="resize test image to the reference size")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("verify-report", help="recompute report aggregates from rows")
    p.add_argument("dir", help="directory holding report.csv and report.json")
    p.set_defaults(func=cmd_verify_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
