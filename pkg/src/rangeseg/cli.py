"""Command-line entry point.

Subcommands: train, eval, infer, benchmark, project, ablate. Exit codes:
0 success, 1 configuration error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

from .config import apply_env_overrides, load_config, model_config, preset, \
    class_config_for
from .errors import ConfigError, DataError
from .metrics import benchmark_forward
from .training import (evaluate_checkpoint, load_ablation_plan, run_ablation,
                       run_inference, run_projection_debug, train)

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors exit with the config-error code."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="rangeseg",
                     description="Range-image LiDAR semantic segmentation")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[], help="train a model")
    p.add_argument("--config", required=True, help="experiment config YAML")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="val")
    p.add_argument("--knn", action="store_true",
                   help="apply KNN label cleanup in point space")
    p.add_argument("--predictions", default=None,
                   help="also write binary prediction files here")
    p.add_argument("--out", default=None, help="write the metrics record here")

    p = sub.add_parser("infer", help="write prediction files for raw scans")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scans", required=True, help="glob of scan files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--knn", action="store_true")

    p = sub.add_parser("benchmark", help="time eval-mode forward passes")
    p.add_argument("--config", required=True)
    p.add_argument("--resolutions", default="512,1024,2048",
                   help="comma-separated range-image widths")
    p.add_argument("--kernels", default="1,3",
                   help="comma-separated input kernel sizes")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out", default=None, help="write the report table here")
    p.add_argument("--figure", default=None,
                   help="also emit a latency bar chart (png)")

    p = sub.add_parser("project", help="dump one scan's range image for debugging")
    p.add_argument("--config", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="run a config-delta comparison matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--plan", required=True, help="ablation plan YAML")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("init-config", help="write a preset config to stdout/file")
    p.add_argument("--preset", choices=["kitti", "poss", "toy"], default="kitti")
    p.add_argument("--root", default=".")
    p.add_argument("--out", default=None)
    return parser


def _benchmark_figure(report, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [f"k{r.kernel_size} {r.height}x{r.width}" for r in report.records]
    latencies = [r.latency_ms for r in report.records]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(labels, latencies)
    ax.set_ylabel("forward latency (ms)")
    ax.set_title(f"device: {report.device}")
    plt.xticks(rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _run(args: argparse.Namespace) -> int:
    if args.command == "init-config":
        from .config import save_config
        cfg = preset(args.preset, args.root)
        if args.out:
            save_config(cfg, args.out)
            print(f"wrote {args.out}")
        else:
            import yaml
            print(yaml.safe_dump(cfg.to_dict(), sort_keys=False), end="")
        return 0

    cfg = apply_env_overrides(load_config(args.config))

    if args.command == "train":
        result = train(cfg, resume=args.resume)
        print(f"trained {result.epochs_run} epochs; "
              f"best val image mIoU {result.best_val_miou:.4f}")
        print(f"last checkpoint: {result.last_checkpoint}")
        print(f"best checkpoint: {result.best_checkpoint}")
        return 0

    if args.command == "eval":
        result = evaluate_checkpoint(cfg, args.checkpoint, args.split,
                                     knn=args.knn,
                                     predictions_dir=args.predictions)
        record = json.dumps(result.to_dict(), indent=2)
        if args.out:
            Path(args.out).write_text(record)
        print(record)
        return 0

    if args.command == "infer":
        paths = sorted(glob.glob(args.scans))
        if not paths:
            raise DataError(f"no scans match {args.scans!r}")
        outcome = run_inference(cfg, args.checkpoint, paths, args.out,
                                knn=args.knn)
        print(f"wrote {len(outcome['written'])} prediction files to {args.out}")
        if outcome["skipped"]:
            print(f"skipped {len(outcome['skipped'])}: "
                  + ", ".join(outcome["skipped"]))
        return 0

    if args.command == "benchmark":
        resolutions = [int(v) for v in args.resolutions.split(",") if v]
        kernels = [int(v) for v in args.kernels.split(",") if v]
        mc = model_config(cfg, class_config_for(cfg).num_classes)
        report = benchmark_forward(mc, resolutions, kernels,
                                   device=cfg.runtime.device,
                                   height=cfg.projection.height,
                                   warmup=args.warmup, iters=args.iters)
        table = report.format_table()
        if args.out:
            Path(args.out).write_text(table + "\n")
        if args.figure:
            _benchmark_figure(report, args.figure)
        print(table)
        return 0

    if args.command == "project":
        written = run_projection_debug(cfg, args.scan, args.out)
        for path in written:
            print(path)
        return 0

    if args.command == "ablate":
        plan = load_ablation_plan(args.plan)
        rows = run_ablation(cfg, plan, args.out)
        from .training import format_ablation_table
        print(format_ablation_table(rows))
        return 1 if all(r.failed for r in rows) else 0

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 1
    except DataError as exc:
        log.error("data error: %s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - map everything else to exit 3
        log.exception("runtime error: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
