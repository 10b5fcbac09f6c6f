"""Command line entry point: ``daretinex {train,decompose,enhance,eval,grid}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import (
    CheckpointError,
    DaRetinexError,
    DatasetError,
    ImageFormatError,
    NumericalError,
    PairingError,
    ShapeError,
)

log = logging.getLogger("daretinex")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="daretinex", description="Degradation-aware Retinex low-light enhancement")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the decomposition or enhancement network")
    p.add_argument("--phase", choices=["decom", "enh"], required=True)
    p.add_argument("--data-root", required=True, help="directory holding low/ and high/")
    p.add_argument("--config", required=True, help="key=value training config")
    p.add_argument("--lambda-tv", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--decom-ckpt", help="decomposition checkpoint (required for --phase enh)")
    p.add_argument("--out-dir", help="overrides output_dir from the config")

    p = sub.add_parser("decompose", help="write reflectance and illumination maps")
    p.add_argument("--input", required=True)
    p.add_argument("--decom-ckpt", required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("enhance", help="enhance one low-light image")
    p.add_argument("--input", required=True)
    p.add_argument("--decom-ckpt", required=True)
    p.add_argument("--enh-ckpt", required=True)
    p.add_argument("--output", required=True)

    p = sub.add_parser("eval", help="full-reference metrics for matching files in two directories")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--figures", help="directory for per-metric bar charts")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("grid", help="side-by-side comparison figure")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--labels", nargs="+")
    p.add_argument("--gt", help="reference image; annotates panels with PSNR/SSIM")
    return parser


def _train(args):
    from .image_io import PairedImageDataset, index_paired_dataset
    from .trainer import TrainConfig, train_decomposition, train_enhancement

    phase = {"decom": "decomposition", "enh": "enhancement"}[args.phase]
    if phase == "enhancement" and not args.decom_ckpt:
        raise UsageError("--decom-ckpt is required for --phase enh")
    try:
        config = TrainConfig.from_file(
            args.config, phase=phase, lambda_tv=args.lambda_tv, seed=args.seed, output_dir=args.out_dir
        )
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    dataset = PairedImageDataset(index_paired_dataset(args.data_root, "train"))
    if phase == "decomposition":
        result = train_decomposition(config, dataset)
    else:
        result = train_enhancement(config, dataset, args.decom_ckpt)
    print(result.checkpoint)


def _decompose(args):
    from .image_io import load_image, save_image
    from .pipeline import Enhancer

    R, I = Enhancer(args.decom_ckpt).decompose(load_image(args.input))
    out = Path(args.out_dir)
    stem = Path(args.input).stem
    save_image(R, out / f"{stem}_R.png")
    save_image(I, out / f"{stem}_I.png")


def _enhance(args):
    from .image_io import load_image, save_image
    from .pipeline import enhance_image

    result = enhance_image(args.decom_ckpt, args.enh_ckpt, load_image(args.input))
    save_image(result.enhanced, args.output)


def _eval(args):
    from .pipeline import evaluate_dirs, write_report

    report = evaluate_dirs(args.pred_dir, args.gt_dir, max_workers=args.workers)
    write_report(report, args.out)
    if args.figures:
        from .plotting import plot_metric_summary

        plot_metric_summary(report.per_image, Path(args.figures) / "metrics.png")
    for name, value in report.aggregate.items():
        print(f"{name}\t{value:.4f}")


def _grid(args):
    from .image_io import load_image
    from .metrics import psnr, ssim
    from .plotting import comparison_grid

    images = [load_image(p) for p in args.inputs]
    labels = args.labels or [Path(p).name for p in args.inputs]
    if len(labels) != len(images):
        raise UsageError("--labels must match --inputs in length")
    notes = None
    if args.gt:
        gt = load_image(args.gt)
        notes = [f"PSNR {psnr(im, gt):.2f} / SSIM {ssim(im, gt):.3f}" for im in images]
    comparison_grid(images, labels, args.output, annotations=notes)


_COMMANDS = {"train": _train, "decompose": _decompose, "enhance": _enhance, "eval": _eval, "grid": _grid}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(name)s: %(message)s")
        _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except PairingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for name in exc.offenders:
            print(f"  unmatched: {name}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, ImageFormatError, ShapeError, CheckpointError, DaRetinexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
