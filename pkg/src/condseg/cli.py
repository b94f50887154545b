"""Command line entry point: ``condseg <subcommand> [options]``.

Exit codes: 0 success, 1 fatal configuration or data error, 2 some grid
cells failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .data import PhantomConfig, write_synthetic_dataset

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


def _config(args) -> ex.ExperimentConfig:
    overrides = {"output": args.output, "seed": args.seed, "jobs": args.jobs}
    return ex.load_config(args.config, **overrides)


def _setup_logging(output: Path):
    # timestamps only go to the log file
    output.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(output / "condseg.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    for old in [h for h in root.handlers if getattr(h, "_condseg", False)]:
        root.removeHandler(old)
        old.close()
    handler._condseg = True
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    console._condseg = True
    root.addHandler(console)


def cmd_synth_data(args) -> int:
    root = Path(args.output)
    dirs = write_synthetic_dataset(root, args.subjects, args.seed or 0, PhantomConfig(n_slices=args.slices))
    print(f"wrote {len(dirs)} synthetic subjects to {root}")
    return EXIT_OK


def cmd_prepare_data(args) -> int:
    cfg = _config(args)
    _setup_logging(cfg.output)
    summary = ex.prepare_data(cfg)
    print(f"processed {len(summary['processed'])}, up to date {len(summary['skipped'])}, "
          f"errors {len(summary['errors'])}")
    for sid, err in sorted(summary["errors"].items()):
        print(f"  {sid}: {err}")
    return EXIT_OK


def _selected(cfg, args):
    cells = ex.filter_cells(ex.grid_cells(cfg), args.cells)
    if not cells:
        raise ex.ConfigError(f"no grid cell matches {args.cells!r}")
    return cells


def _finish_grid(summary) -> int:
    print(f"completed {len(summary['completed'])}, skipped {len(summary['skipped'])}, "
          f"failed {len(summary['failed'])}")
    for run_id in sorted(summary["failed"]):
        print(f"  failed: {run_id}")
    return EXIT_PARTIAL if summary["failed"] else EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    _setup_logging(cfg.output)
    cells = _selected(cfg, args)
    if len(cells) != 1:
        raise ex.ConfigError(f"train runs a single cell; {len(cells)} match {args.cells!r}")
    return _finish_grid(ex.run_grid(cfg, cells, jobs=1))


def cmd_grid(args) -> int:
    cfg = _config(args)
    _setup_logging(cfg.output)
    (cfg.output / "config.txt").write_text(ex.dump_config(cfg))
    return _finish_grid(ex.run_grid(cfg, _selected(cfg, args)))


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    _setup_logging(cfg.output)
    slices = ex.load_cache(cfg.output)
    cells = [c for c in _selected(cfg, args) if ex.is_complete(cfg, c)]
    for cell in cells:
        mean, std = ex.aggregate(ex.evaluate_cell(cfg, cell, slices))
        print(f"{cell.run_id}: {mean:.4f} ± {std:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.config:
        cfg = _config(args)
        results_dir, archs, fracs = cfg.output, cfg.architectures, list(cfg.fractions)
    else:
        results_dir, archs, fracs = Path(args.output or "runs"), ex.ARCHITECTURES, None
    _setup_logging(results_dir)
    tables = ex.report(results_dir, archs, fracs)
    if not tables:
        print(f"no completed cells under {results_dir}")
        return EXIT_FATAL
    for arch in tables:
        print((results_dir / "reports" / f"{arch}.txt").read_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condseg", description="Conditioned cardiac segmentation experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value experiment config")
    common.add_argument("--output", type=Path, help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--jobs", type=int, help="parallel grid cells")
    common.add_argument("--cells", help="cell filter, e.g. 'arch=unet,variant=film-*,fraction=1'")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic dataset in ACDC layout")
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--slices", type=int, default=8)
    p.set_defaults(func=cmd_synth_data)

    for name, func, text in (
        ("prepare-data", cmd_prepare_data, "build the preprocessing cache"),
        ("train", cmd_train, "train and evaluate a single grid cell"),
        ("grid", cmd_grid, "run all selected grid cells, skipping completed ones"),
        ("evaluate", cmd_evaluate, "re-evaluate completed cells from their checkpoints"),
        ("report", cmd_report, "write result tables"),
    ):
        sub.add_parser(name, parents=[common], help=text).set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "synth-data" and args.output is None:
        args.output = Path("data/synthetic")
    try:
        return args.func(args)
    except (ex.ConfigError, ex.DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
