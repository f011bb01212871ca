"""warpforge command line.

Exit codes: 0 success, 1 other engine failure (e.g. warp generation), 2 bad flags or
configuration, 3 input/output problems (missing or malformed files, shape mismatch,
degenerate images), 4 numerical abort (non-finite loss).
"""
from pathlib import Path
from typing import Any, Dict, List, Optional
import argparse
import logging
import os
import sys

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError
from tabulate import tabulate

from core import analyze, data
from core.errors import ConfigError, DegenerateInputError, FormatError, NumericalError, ShapeError, WarpforgeError
from core.regularize import RegularizerKind
from core.similarity import SimilarityKind
from core.warp import warp_bilinear
import eval as method_eval
import pipeline

load_dotenv()

logger = logging.getLogger("cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

# flag destination -> dotted RegistrationConfig key
CONFIG_FLAGS = {
    "loss": "similarity.kind",
    "reg": "regularizer.kind",
    "lam": "lam",
    "alpha": "regularizer.alpha",
    "sigma": "regularizer.sigma",
    "iters": "iterations",
    "lr": "learning_rate",
    "seed": "seed",
    "prefilter_sigma": "prefilter_sigma",
    "precision": "precision",
    "optimizer": "optimizer.kind",
}


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser, with_reg: bool = True, reg_required: bool = False) -> None:
    p.add_argument("--loss", choices=[k.value for k in SimilarityKind])
    if with_reg:
        p.add_argument("--reg", choices=[k.value for k in RegularizerKind], required=reg_required)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--alpha", type=float, help="weight of the Jacobian term in diffjac")
    p.add_argument("--sigma", type=float, help="Gaussian field smoothing width for --reg gauss")
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--prefilter-sigma", type=float)
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--optimizer", choices=["adam", "sgd"])


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: getattr(args, dest) for dest, key in CONFIG_FLAGS.items() if getattr(args, dest, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="warpforge", description="Per-pair deformable 2D image registration")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--progress", action="store_true", help="show progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="register a moving image to a fixed image")
    p.add_argument("--moving", type=Path)
    p.add_argument("--fixed", type=Path)
    p.add_argument("--labels", type=Path)
    p.add_argument("--manifest", type=Path, help="re-run with the config of a previous manifest.json")
    p.add_argument("--save-params", action="store_true")
    p.add_argument("--out", type=Path, default=Path("out"))
    _add_config_flags(p)

    p = sub.add_parser("make-phantom", help="generate a synthetic phantom and label map")
    p.add_argument("--kind", required=True, choices=[k.value for k in data.PhantomKind])
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--noise", type=float)
    p.add_argument("--blur", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warp", type=float, dest="warp_max", help="also write a moving image warped by a smooth field")
    p.add_argument("--smoothness", type=float, default=16.0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("analyze", help="fold report and metrics for a displacement field")
    p.add_argument("--field", type=Path, required=True)
    p.add_argument("--moving", type=Path)
    p.add_argument("--fixed", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sweep", help="registration over a regularization parameter grid")
    p.add_argument("--moving", type=Path, required=True)
    p.add_argument("--fixed", type=Path, required=True)
    p.add_argument("--param", choices=["lambda", "sigma", "alpha"])
    p.add_argument("--param-grid", type=_float_list, required=True)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p, reg_required=True)

    p = sub.add_parser("compare", help="compare losses and regularizers on one pair")
    p.add_argument("--moving", type=Path)
    p.add_argument("--fixed", type=Path)
    p.add_argument("--phantom", choices=[k.value for k in data.PhantomKind], default="shepp")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--max-displacement", type=float, default=4.0)
    p.add_argument("--warp-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p, with_reg=False)
    return parser


def _job_limit(requested: int) -> int:
    cap = os.getenv("WARPFORGE_THREADS")
    jobs = max(1, requested)
    if cap:
        try:
            limit = int(cap)
        except ValueError:
            raise ConfigError(f"WARPFORGE_THREADS must be an integer, got {cap!r}") from None
        jobs = min(jobs, max(1, limit))
    return jobs


# --- commands ---

def cmd_register(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    base: Dict[str, Any] = {}
    moving, fixed, labels = args.moving, args.fixed, args.labels
    if args.manifest is not None:
        manifest = pipeline.RunManifest.model_validate(data.read_json(args.manifest))
        base = manifest.config.model_dump(mode="json")
        moving = moving or Path(manifest.inputs["moving"])
        fixed = fixed or Path(manifest.inputs["fixed"])
        labels = labels or (Path(manifest.inputs["labels"]) if "labels" in manifest.inputs else None)
    if moving is None or fixed is None:
        parser.error("register needs --moving and --fixed (or --manifest)")

    ctx = pipeline.RunContext(
        out_dir=args.out,
        base_settings=base,
        overrides=_overrides(args),
        moving_path=moving,
        fixed_path=fixed,
        labels_path=labels,
        save_params=args.save_params,
        progress=args.progress,
    )
    ctx = pipeline.build_register_pipeline(args.progress).run(ctx)
    print(tabulate(ctx.metrics.items(), headers=["Metric", "Value"], tablefmt="simple"))
    return EXIT_OK


def cmd_make_phantom(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    spec = data.PhantomSpec(kind=args.kind, size=args.size, noise=args.noise, blur=args.blur, seed=args.seed)
    image, labels = data.make_phantom(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    data.write_image(image, args.out / "phantom.png")
    data.write_labels(labels, args.out / "labels.png")
    record: Dict[str, Any] = {"phantom": spec}
    if args.warp_max is not None:
        warp_spec = data.SyntheticWarpSpec(max_displacement=args.warp_max, smoothness=args.smoothness, seed=args.seed)
        truth = data.make_ground_truth_warp(warp_spec, spec.size)
        data.write_image(warp_bilinear(image, truth).data, args.out / "moving.png")
        data.write_field(truth, args.out / "truth.dfld")
        record["warp"] = warp_spec
    data.write_json(record, args.out / "spec.json")
    logger.info(f"Phantom written to {args.out}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if (args.moving is None) != (args.fixed is None):
        parser.error("analyze needs both --moving and --fixed, or neither")
    field = data.read_field(args.field)
    args.out.mkdir(parents=True, exist_ok=True)
    report = analyze.fold_report(field)
    data.write_json(report.to_dict(), args.out / "fold_report.json")
    data.write_heatmap(analyze.jacobian_determinants(field), args.out / "jacobian.png")
    rows = list(report.to_dict().items())
    if args.moving is not None:
        moving, fixed = data.read_image(args.moving), data.read_image(args.fixed)
        ssim_value, mse_value = analyze.eval_metrics(warp_bilinear(moving, field.astype(np.float64)).data, fixed)
        metrics = {
            "ssim": ssim_value,
            "mse_255": mse_value,
            "fold_count": report.fold_count,
            "fold_percent": report.fold_percent,
            "iterations": None,
            "final_loss": None,
            "seed": None,
        }
        data.write_json(metrics, args.out / "metrics.json")
        rows += [("ssim", ssim_value), ("mse_255", mse_value)]
    print(tabulate(rows, headers=["Metric", "Value"], tablefmt="simple"))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if not args.param_grid:
        parser.error("--param-grid needs at least one value")
    if not args.seeds:
        parser.error("--seeds needs at least one value")
    moving, fixed = data.read_image(args.moving), data.read_image(args.fixed)
    overrides = _overrides(args)
    kind = RegularizerKind(overrides.pop("regularizer.kind"))
    base = pipeline.resolve_config({}, overrides, moving.shape[0])
    jobs = _job_limit(args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)

    def _write_cell(cell: analyze.SweepCell, result) -> None:
        ctx = pipeline.RunContext(
            out_dir=args.out / f"{cell.pair}_{cell.param}_{cell.value:g}_seed{cell.seed}",
            config=analyze.cell_config(base, cell.kind, cell.param, cell.value, cell.seed),
            moving_path=args.moving,
            fixed_path=args.fixed,
            moving=moving,
            fixed=fixed,
            result=result,
        )
        pipeline.build_cell_pipeline().run(ctx)

    records = analyze.sweep([("pair", moving, fixed)], [kind], args.param_grid, args.seeds, base,
                            param=args.param, jobs=jobs, on_result=_write_cell, progress=args.progress)
    analyze.write_sweep_csv(records, args.out / "sweep.csv")
    trend = analyze.sweep_trend(records)
    data.write_json(trend, args.out / "trend.json")
    print(tabulate([[r.param, r.value, r.seed, f"{r.ssim:.4f}", f"{r.mse:.3f}", r.fold_count, r.status]
                    for r in records],
                   headers=["Param", "Value", "Seed", "SSIM", "MSE", "|J| <= 0", "Status"], tablefmt="grid"))
    if trend:
        print(tabulate(trend, headers="keys", tablefmt="simple"))
    failed = sum(r.status != "ok" for r in records)
    if failed:
        logger.warning(f"{failed} of {len(records)} sweep cells failed")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if (args.moving is None) != (args.fixed is None):
        parser.error("compare needs both --moving and --fixed, or neither")
    if args.moving is not None:
        moving, fixed = data.read_image(args.moving), data.read_image(args.fixed)
    else:
        moving, fixed, _, _ = data.make_synthetic_pair(
            data.PhantomSpec(kind=args.phantom, size=args.size),
            data.SyntheticWarpSpec(max_displacement=args.max_displacement, seed=args.warp_seed),
        )
    overrides = _overrides(args)
    lam = overrides.pop("lam", method_eval.DEFAULT_COMPARISON_LAMBDA)
    prefilter = overrides.pop("prefilter_sigma", method_eval.DEFAULT_PREFILTER_SIGMA)
    base = pipeline.resolve_config({}, overrides, moving.shape[0])
    method_eval.run_comparison(moving, fixed, base, args.out, lam=lam, prefilter_sigma=prefilter)
    return EXIT_OK


COMMANDS = {
    "register": cmd_register,
    "make-phantom": cmd_make_phantom,
    "analyze": cmd_analyze,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def _configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else os.getenv("WARPFORGE_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        stream=sys.stderr,
    )


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    _configure_logging(args.verbose)

    try:
        return COMMANDS[args.command](args, parser)
    except SystemExit as e:
        return int(e.code or 0)
    except (ValidationError, ConfigError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"error: {e} (iteration {e.iteration})", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, ShapeError, DegenerateInputError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except WarpforgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
