"""Single command-line entry point for the whole pipeline.

Subcommands map onto the experiment stages: gen (synthetic dataset),
baseline (block matching), train (refinement network), eval (metrics),
analyze (quadratic trend of binned errors), shade (depth-gradient
visualizations). Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluator, io_formats, scenegen, trainer
from .block_match import MatchParams, compute_disparity, fill_invalid
from .geometry import CameraRig, ScalarField, disparity_to_depth
from .imaging import shading_image, warp_right_to_left
from .parallel import default_threads, parallel_map
from .refine import HeadMode, apply_head, prepare_inputs, residual_field

logger = logging.getLogger(__name__)


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / "manifest.tsv" if p.is_dir() else p


def cmd_gen(args) -> int:
    spec = scenegen.SceneSpec(
        seed=args.seed, width=args.width, height=args.height,
        rig=CameraRig(args.baseline_m, args.focal_px))
    manifest = scenegen.generate_dataset(spec, args.count, args.out,
                                         threads=args.threads)
    print(f"wrote {args.count} samples; manifest at {manifest}")
    return 0


def cmd_baseline(args) -> int:
    manifest_path = _manifest_path(args.data)
    manifest = io_formats.read_manifest(manifest_path)
    params = MatchParams(d_max=args.dmax, census_window=args.census,
                         agg_window=args.agg)
    root = manifest_path.parent

    def run_one(entry):
        sample = io_formats.load_sample(root, entry)
        d = compute_disparity(sample.left, sample.right, params)
        rel = f"{entry.sample_dir}/d_baseline.pfm"
        io_formats.write_pfm(d, root / rel)
        return rel

    rels = parallel_map(run_one, manifest.entries, args.threads)
    for entry, rel in zip(manifest.entries, rels):
        entry.d_baseline = rel
    manifest.d_max = args.dmax
    io_formats.write_manifest(manifest, manifest_path)
    print(f"baseline disparity written for {len(rels)} samples (d_max={args.dmax})")
    return 0


def cmd_train(args) -> int:
    cfg = trainer.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
        head=HeadMode.parse(args.head), seed=args.seed)
    ckpt = trainer.train(_manifest_path(args.data), cfg, args.ckpt_out,
                         log_csv=str(Path(args.ckpt_out).with_suffix(".log.csv")))
    print(f"final checkpoint at {ckpt}; best at {ckpt}.best")
    return 0


def cmd_eval(args) -> int:
    reports = evaluator.evaluate(
        _manifest_path(args.data), d_max=args.dmax, checkpoint=args.ckpt,
        report_dir=args.report_dir)
    for r in reports:
        print(f"{r.variant}: depth_error={r.depth_error_m:.4f} m  "
              f"epe={r.epe_px:.4f} px  d1_1px={r.d1_1px:.4f}  "
              f"d1_3px={r.d1_3px:.4f}  a2={r.quad_coeffs[0]:.4f}")
    print(f"report written under {args.report_dir}")
    return 0


def cmd_analyze(args) -> int:
    results = evaluator.analyze(args.report_dir, args.bin_width)
    for variant, (a2, a1, a0) in sorted(results.items()):
        print(f"{variant}: a2={a2:.6f} a1={a1:.6f} a0={a0:.6f}")
    if {"baseline", "refined"} <= results.keys():
        b, r = results["baseline"][0], results["refined"][0]
        print(f"quadratic coefficient baseline={b:.6f} refined={r:.6f} "
              f"({'reduced' if r < b else 'NOT reduced'})")
    return 0


def cmd_shade(args) -> int:
    manifest_path = _manifest_path(args.data)
    manifest = io_formats.read_manifest(manifest_path)
    net = io_formats.load_checkpoint(args.ckpt) if args.ckpt else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = manifest_path.parent
    for i, entry in enumerate(manifest.entries):
        sample = io_formats.load_sample(root, entry)
        tag = f"sample_{i:05d}"
        io_formats.write_pgm(shading_image(sample.z_gt, args.eps).values[:, :, 0],
                             out / f"{tag}_gt.pgm")
        if sample.d_baseline is None:
            continue
        z_a = disparity_to_depth(sample.d_baseline, manifest.rig)
        z_dense = fill_invalid(z_a)
        io_formats.write_pgm(shading_image(z_dense, args.eps).values[:, :, 0],
                             out / f"{tag}_baseline.pgm")
        if net is not None:
            warped = warp_right_to_left(sample.right, sample.d_baseline)
            x = prepare_inputs(z_a, sample.left, warped)
            f = residual_field(net.infer(x.data), z_dense)
            z_ref = apply_head(z_dense, f, net.head)
            io_formats.write_pgm(shading_image(z_ref, args.eps).values[:, :, 0],
                                 out / f"{tag}_refined.pgm")
    print(f"shading images written under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="run seed")
    common.add_argument("--threads", type=int, default=default_threads(),
                        help="worker parallelism bound")

    parser = argparse.ArgumentParser(prog="stereorefine",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--width", type=int, default=192)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--baseline-m", type=float, default=0.54)
    p.add_argument("--focal-px", type=float, default=480.0)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("baseline", parents=[common], help="block-matching disparity")
    p.add_argument("--data", required=True)
    p.add_argument("--dmax", type=int, required=True)
    p.add_argument("--census", type=int, default=5)
    p.add_argument("--agg", type=int, default=7)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("train", parents=[common], help="train the refinement network")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--head", choices=("mul", "add"), default="mul")
    p.add_argument("--ckpt-out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="compute metrics and reports")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--dmax", type=int, default=None)
    p.add_argument("--report-dir", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="binned quadratic trend fit")
    p.add_argument("--report-dir", required=True)
    p.add_argument("--bin-width", type=float, default=1.0)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("shade", parents=[common], help="depth-gradient shading images")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_shade)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "fn"}
    print(f"config: {resolved}")
    try:
        return args.fn(args)
    except Exception as e:  # runtime failures -> exit 1 with one-line diagnostic
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
