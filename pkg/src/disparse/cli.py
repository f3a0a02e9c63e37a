"""Command-line entry point.

Exit status: 0 on success, 1 for configuration or usage errors, 2 when a run
fails at runtime.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .analysis import AnalysisError, layerwise_iou, with_watershed, write_iou_table
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config
from .report import ReportError, find_runs, write_report
from .runner import execute_run, load_trunk_masks, output_root

log = logging.getLogger("disparse")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _run_options(p: argparse.ArgumentParser, dynamic: bool = False, pretrained: bool = False) -> None:
    p.add_argument("--config", help="YAML experiment config; flags override its values")
    p.add_argument("--seed", type=_ints, help="seed or comma-separated seeds")
    p.add_argument("--output-dir", help="output root (default: $DISPARSE_OUTPUT_ROOT or config output_dir)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--overwrite", action="store_true", help="replace existing run directories")
    if p.prog.endswith("train-dense"):
        return
    p.add_argument("--method")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--arbiter", choices=["or", "majority"])
    p.add_argument("--tie-keep", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--scope", choices=["global", "erk"])
    p.add_argument("--calibrate", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--calibration-tol", type=float)
    p.add_argument("--saliency-batches", type=int)
    p.add_argument("--accumulation", choices=["signed", "abs"])
    if dynamic:
        p.add_argument("--alpha", type=float)
        p.add_argument("--end-fraction", type=float)
        p.add_argument("--update-interval", type=int)
    if pretrained:
        p.add_argument("--checkpoint", help="dense model.npz; trained on the fly when omitted")
        p.add_argument("--finetune-iterations", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="disparse", description="Per-task saliency sparsification for multitask MLPs.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _run_options(sub.add_parser("train-dense", help="train the dense multitask model"))
    _run_options(sub.add_parser("train-static", help="mask at initialization, then train"))
    _run_options(sub.add_parser("train-dynamic", help="train with scheduled prune and grow"), dynamic=True)
    _run_options(sub.add_parser("prune", help="prune a trained model and finetune"), pretrained=True)

    p = sub.add_parser("sweep", help="grid over methods, sparsity levels and seeds")
    _run_options(p, dynamic=True, pretrained=True)
    p.add_argument("--paradigm", choices=["static", "dynamic", "pretrained"])
    p.add_argument("--methods", help="comma-separated methods (default: the config's method)")
    p.add_argument("--levels", dest="levels", type=_floats, help="alias of --sparsity-list")
    p.add_argument("--sparsity-list", dest="levels", type=_floats)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--report", help="report path (default: <output>/report.csv)")

    p = sub.add_parser("analyze-masks", help="layer-wise IoU of trunk masks")
    p.add_argument("masks", nargs="+", help="masks.npz or task_shared_masks.npz files")
    p.add_argument("--out", required=True, help="output CSV (layer_id, iou)")
    p.add_argument("--threshold", type=float, default=0.15, help="IoU drop that marks a watershed")

    p = sub.add_parser("report", help="comparison table across run directories")
    p.add_argument("runs", nargs="+", help="run directories, or directories containing them")
    p.add_argument("--out", required=True)
    return parser


def _sweep_sparsity(argv: list[str]) -> list[str]:
    # `sweep --sparsity 0.3,0.5` reads naturally; route it to the list option.
    out = list(argv)
    if out and out[0] == "sweep":
        for i, a in enumerate(out):
            if a == "--sparsity":
                out[i] = "--sparsity-list"
            elif a.startswith("--sparsity="):
                out[i] = "--sparsity-list=" + a.split("=", 1)[1]
    return out


def config_from_args(args, paradigm: str) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data = cfg.to_dict()
    data["paradigm"] = paradigm
    if paradigm == "dense":
        data["method"] = "dense"
    elif data["method"] not in ("disparse", "baseline-combined", "random", "magnitude"):
        data["method"] = "disparse"

    def put(value, *path):
        if value is None:
            return
        node = data
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value

    put(args.seed, "seeds")
    put(args.output_dir, "output_dir")
    put(args.iterations, "optim", "iterations")
    for flag, path in [
        ("method", ("method",)),
        ("sparsity", ("sparsity",)),
        ("arbiter", ("arbiter",)),
        ("tie_keep", ("tie_keep",)),
        ("scope", ("scope",)),
        ("calibrate", ("calibrate",)),
        ("calibration_tol", ("calibration_tol",)),
        ("saliency_batches", ("saliency", "batches")),
        ("accumulation", ("saliency", "accumulation")),
        ("alpha", ("schedule", "alpha")),
        ("end_fraction", ("schedule", "end_fraction")),
        ("update_interval", ("schedule", "update_interval")),
        ("checkpoint", ("pretrain", "checkpoint")),
        ("finetune_iterations", ("pretrain", "finetune_iterations")),
    ]:
        put(getattr(args, flag, None), *path)
    return config_from_dict(data)


def _run_all(cfg: ExperimentConfig, root: Path, overwrite: bool) -> list[Path]:
    return [execute_run(cfg, seed, root, overwrite) for seed in cfg.seeds]


def _sweep_job(job):
    cfg_dict, seed, root, overwrite = job
    return execute_run(config_from_dict(cfg_dict), seed, root, overwrite)


def cmd_sweep(args) -> int:
    paradigm = args.paradigm or "static"
    base = config_from_args(args, paradigm)
    methods = args.methods.split(",") if args.methods else [base.method]
    levels = args.levels or [base.sparsity]
    root = output_root(args.output_dir, base)
    jobs = []
    for method, s in itertools.product(methods, levels):
        cfg = dataclasses.replace(base, method=method, sparsity=s).validate()
        jobs += [(cfg.to_dict(), seed, root, args.overwrite) for seed in cfg.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            dirs = list(pool.map(_sweep_job, jobs))
    else:
        dirs = [_sweep_job(j) for j in jobs]
    for d in dirs:
        print(d)
    report = Path(args.report) if args.report else root / "report.csv"
    write_report(dirs, report)
    print(report)
    return EXIT_OK


def cmd_analyze(args) -> int:
    masks = [m for path in args.masks for m in load_trunk_masks(path)]
    profile = with_watershed(layerwise_iou(masks), args.threshold)
    write_iou_table(profile, args.out)
    for lid, v, flag in zip(profile.layer_ids, profile.iou, profile.degenerate):
        print(f"{lid}\t{v:.6f}" + ("\t(empty union)" if flag else ""))
    print(f"watershed: {profile.watershed_layer or 'none'}")
    return EXIT_OK


def dispatch(args) -> int:
    if args.command in ("train-dense", "train-static", "train-dynamic", "prune"):
        paradigm = {
            "train-dense": "dense",
            "train-static": "static",
            "train-dynamic": "dynamic",
            "prune": "pretrained",
        }[args.command]
        cfg = config_from_args(args, paradigm)
        for d in _run_all(cfg, output_root(args.output_dir, cfg), args.overwrite):
            print(d)
        return EXIT_OK
    if args.command == "sweep":
        return cmd_sweep(args)
    if args.command == "analyze-masks":
        return cmd_analyze(args)
    if args.command == "report":
        print(write_report(find_runs(args.runs), args.out))
        return EXIT_OK
    raise UsageError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(_sweep_sparsity(argv))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return dispatch(args)
    except (ConfigError, UsageError, ReportError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AnalysisError, ValueError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
