"""
Command-line entry point: ``rekall train|evaluate|suite|report``.
"""

import argparse
import glob
import math
import sys
from pathlib import Path

from .checkpoint import latest_checkpoint, load_checkpoint
from .config import Config
from .evaluation import average_accuracy, published_table, recompute_final_row
from .exceptions import CheckpointError, RekallError
from .logging_config import get_logger, setup_cli_logging
from .models import AccuracyMatrix, RunConfig, TrainingMode
from .reporting import aggregate_reports, emit_report, load_run_reports
from .suite import expand_configs, run_suite
from .task_stream import build_task_stream
from .trainer import run_experiment

logger = get_logger(__name__)

MODES = [m.value for m in TrainingMode]


def parse_arguments(argv: list[str] | None = None) -> argparse.Namespace:
    """
    Parse command-line arguments.

    :param argv: Arguments without the program name, ``sys.argv[1:]`` if omitted
    :type argv: Optional[List[str]]

    :return: Parsed namespace with a ``command`` attribute
    :rtype: argparse.Namespace
    """
    parser = argparse.ArgumentParser(
        prog="rekall", description="Data-free class-incremental metric learning"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train one configuration")
    train.add_argument("--config", required=True, type=Path, help="Run configuration (JSON)")
    train.add_argument(
        "--resume",
        nargs="?",
        const="latest",
        default=None,
        help="Checkpoint to resume from (default: the run's last checkpoint)",
    )
    train.add_argument("--mode", choices=MODES, help="Override the training mode")
    train.add_argument("--seed", type=int, help="Override the seed")
    train.add_argument("--epochs", type=int, help="Override epochs per task")
    train.add_argument("--output-dir", type=Path, help="Parent of the run directory")

    evaluate = commands.add_parser("evaluate", help="Recompute a run's accuracy matrix")
    evaluate.add_argument("--run", required=True, type=Path, help="Run directory")

    suite = commands.add_parser("suite", help="Run modes x seeds and aggregate A_K")
    suite.add_argument("--configs", required=True, help="Glob of run configuration files")
    suite.add_argument("--seeds", type=int, default=3, help="Number of seeds (0..N-1)")
    suite.add_argument("--modes", nargs="+", choices=MODES, help="Modes (default: each config's own)")
    suite.add_argument("--workers", type=int, default=1, help="Worker processes")
    suite.add_argument("--out", type=Path, help="Directory for the combined report")

    report = commands.add_parser("report", help="Aggregate finished runs")
    report.add_argument("--runs", required=True, nargs="+", type=Path, help="Run directories")
    report.add_argument("--out", required=True, type=Path, help="Output directory")

    return parser.parse_args(argv)


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_file(args.config)
    overrides = {
        "mode": args.mode and TrainingMode(args.mode),
        "seed": args.seed,
        "epochs": args.epochs,
        "output_dir": args.output_dir,
    }
    update = {k: v for k, v in overrides.items() if v is not None}
    if "output_dir" not in update and config.output_dir == Path("./runs"):
        update["output_dir"] = Config.RUNS_DIR
    # model_copy skips validation
    return RunConfig.model_validate({**config.model_dump(), **update})


def train_command(args: argparse.Namespace) -> int:
    config = _load_config(args)
    resume = None
    if args.resume == "latest":
        resume = latest_checkpoint(config.run_dir)
        if resume is None:
            logger.warning(f"No checkpoint in {config.run_dir}, starting fresh")
    elif args.resume is not None:
        resume = Path(args.resume)

    report = run_experiment(config, resume=resume)
    print(f"Run directory: {config.run_dir}")
    _print_matrix(report.matrix)
    if report.average_accuracy is not None:
        print(f"A_K = {100 * report.average_accuracy:.2f}%")
    return 0


def recompute_matrix(run_dir: Path) -> tuple[AccuracyMatrix, AccuracyMatrix]:
    """
    Rebuild a run's accuracy matrix from its per-task checkpoints.

    Row i is re-evaluated with the student and centroids saved after task i; the
    task stream is rebuilt from the stored configuration.

    :param run_dir: Run directory
    :type run_dir: Path

    :return: (recomputed matrix, matrix stored in the last checkpoint)
    :rtype: Tuple[AccuracyMatrix, AccuracyMatrix]

    :raises CheckpointError: If the run has no checkpoint or a task checkpoint is missing
    """
    last = latest_checkpoint(run_dir)
    if last is None:
        raise CheckpointError(f"no checkpoint in {run_dir}")
    device = Config.resolve_device()
    final = load_checkpoint(last, device)
    config = final.config
    stream = build_task_stream(
        config.dataset,
        config.protocol,
        config.seed,
        data_root=config.data_root,
        synthetic=config.synthetic,
        image_folder=config.image_folder,
    )

    matrix = AccuracyMatrix(num_tasks=stream.total_tasks)
    for i in range(1, final.completed_tasks + 1):
        state = load_checkpoint(run_dir / "checkpoints" / f"task{i:02d}.pt", device)
        matrix.append_row(recompute_final_row(state, stream), final.matrix.counts[i - 1])
    return matrix, final.matrix


def _same_rows(a: AccuracyMatrix, b: AccuracyMatrix) -> bool:
    return len(a.rows) == len(b.rows) and all(
        math.isclose(x, y, abs_tol=1e-9)
        for ra, rb in zip(a.rows, b.rows, strict=True)
        for x, y in zip(ra, rb, strict=True)
    )


def evaluate_command(args: argparse.Namespace) -> int:
    matrix, stored = recompute_matrix(args.run)
    _print_matrix(matrix)
    if matrix.completed_tasks == matrix.num_tasks:
        print(f"A_K = {100 * average_accuracy(matrix):.2f}%")
    if not _same_rows(matrix, stored):
        logger.warning("Recomputed matrix differs from the stored one")
        print("Stored matrix:")
        _print_matrix(stored)
        return 1
    return 0


def suite_command(args: argparse.Namespace) -> int:
    paths = sorted(glob.glob(args.configs))
    if not paths:
        logger.error(f"No configuration matches {args.configs}")
        return 2
    seeds = list(range(args.seeds))
    configs = []
    for path in paths:
        base = RunConfig.from_file(path)
        modes = [TrainingMode(m) for m in args.modes] if args.modes else [base.mode]
        configs += expand_configs(base, modes, seeds)

    result = run_suite(configs, max_workers=args.workers, out_dir=args.out)
    print(result.table.to_string())
    print("\nPublished A_K (%):")
    print(published_table().to_string())
    for name, error in result.failures.items():
        print(f"FAILED {name}: {error}")
    return 1 if result.failures else 0


def report_command(args: argparse.Namespace) -> int:
    reports = load_run_reports(args.runs)
    if not reports:
        logger.error("No run reports found")
        return 2
    emit_report(reports, args.out)
    print(aggregate_reports(reports).to_string())
    return 0


def _print_matrix(matrix: AccuracyMatrix) -> None:
    for i, row in enumerate(matrix.as_percent(), 1):
        print(f"after task {i}: " + "  ".join(f"{a:6.2f}" for a in row))


COMMANDS = {
    "train": train_command,
    "evaluate": evaluate_command,
    "suite": suite_command,
    "report": report_command,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_arguments(argv)
    setup_cli_logging(args.verbose)
    if not Config.validate():
        return 2
    try:
        return COMMANDS[args.command](args)
    except RekallError as e:
        logger.error(str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
