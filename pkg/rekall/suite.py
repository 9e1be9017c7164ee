"""
Multi-run comparison suites (modes x seeds).

Each run writes to its own run directory. Failures are logged and recorded on
the run's row; the remaining runs continue.
"""

import logging
from collections import Counter
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from .exceptions import ConfigurationError, EvaluationError
from .models import RunConfig, RunReport, TrainingMode
from .reporting import aggregate_reports, emit_report
from .trainer import run_experiment

logger = logging.getLogger(__name__)


@dataclass
class SuiteResult:
    """
    Outcome of a suite.

    :ivar table: Mean and std of A_K (%) per mode, see :func:`aggregate_reports`
    :vartype table: pd.DataFrame
    :ivar failures: run name -> error message
    :vartype failures: Dict[str, str]
    """

    table: pd.DataFrame
    reports: list[RunReport] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)


def expand_configs(
    base: RunConfig, modes: Sequence[TrainingMode], seeds: Sequence[int]
) -> list[RunConfig]:
    """
    One configuration per (mode, seed), each with its own run name.

    :param base: Template configuration
    :type base: RunConfig
    :param modes: Training modes
    :type modes: Sequence[TrainingMode]
    :param seeds: Seeds
    :type seeds: Sequence[int]

    :return: Configurations
    :rtype: List[RunConfig]
    """
    label = (base.image_folder.name if base.image_folder else None) or base.dataset
    return [
        base.model_copy(
            update={
                "mode": TrainingMode(mode),
                "seed": seed,
                "name": f"{label}-{TrainingMode(mode).value}-seed{seed}",
            }
        )
        for mode in modes
        for seed in seeds
    ]


def _check_comparable(configs: Sequence[RunConfig]) -> None:
    ignored = {"mode", "seed", "name"}
    references: dict[str, dict] = {}
    for config in configs:
        dumped = config.model_dump(exclude=ignored)
        reference = references.setdefault(config.dataset, dumped)
        if dumped != reference:
            raise ConfigurationError(
                f"suite configurations of one dataset must differ only in mode and seed "
                f"({config.run_name})"
            )
    names = [c.run_name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigurationError("suite runs need distinct run names")


def _run_one(config: RunConfig) -> RunReport:
    return run_experiment(config)


def _summary_row(outcome: RunReport | str, config: RunConfig) -> dict:
    row = {"run": config.run_name, "mode": config.mode.value, "seed": config.seed}
    if isinstance(outcome, str):
        return {**row, "A_K": None, "error": outcome}
    accuracy = outcome.average_accuracy
    return {**row, "A_K": None if accuracy is None else 100.0 * accuracy, "error": None}


def run_suite(
    configs: Sequence[RunConfig],
    max_workers: int | None = None,
    out_dir: Path | None = None,
) -> SuiteResult:
    """
    Execute every configuration and aggregate A_K per mode.

    :param configs: Configurations differing only in mode and seed
    :type configs: Sequence[RunConfig]
    :param max_workers: Worker processes; None or 1 runs sequentially
    :type max_workers: Optional[int]
    :param out_dir: Where to write the combined report, if anywhere
    :type out_dir: Optional[Path]

    :return: Aggregated table, reports and per-run failures
    :rtype: SuiteResult

    :raises ConfigurationError: For an empty or non-comparable configuration set
    """
    if not configs:
        raise ConfigurationError("empty suite")
    _check_comparable(configs)

    outcomes: dict[str, RunReport | str] = {}
    if max_workers is None or max_workers <= 1:
        for config in configs:
            try:
                outcomes[config.run_name] = _run_one(config)
            except Exception as e:
                logger.error(f"Run {config.run_name} failed: {e}")
                outcomes[config.run_name] = f"{type(e).__name__}: {e}"
    else:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            futures = {pool.submit(_run_one, c): c for c in configs}
            for future in as_completed(futures):
                config = futures[future]
                try:
                    outcomes[config.run_name] = future.result()
                except Exception as e:
                    logger.error(f"Run {config.run_name} failed: {e}")
                    outcomes[config.run_name] = f"{type(e).__name__}: {e}"

    reports = [o for o in outcomes.values() if isinstance(o, RunReport)]
    failures = {name: o for name, o in outcomes.items() if isinstance(o, str)}
    try:
        table = aggregate_reports(reports)
    except EvaluationError:
        table = pd.DataFrame(columns=["mean", "std", "runs", "seeds", "published"])
    if failures:
        counts = Counter((c.dataset, c.mode.value) for c in configs if c.run_name in failures)
        failed = pd.Series(
            list(counts.values()),
            index=pd.MultiIndex.from_tuples(list(counts), names=["dataset", "mode"]),
            name="failed",
        )
        table = failed.to_frame() if table.empty else table.join(failed, how="outer")
        table["failed"] = table["failed"].fillna(0).astype(int)

    if out_dir is not None and reports:
        emit_report(reports, out_dir)
        pd.DataFrame(
            [_summary_row(outcomes[c.run_name], c) for c in configs]
        ).to_csv(out_dir / "runs.csv", index=False)

    logger.info(f"Suite finished: {len(reports)} runs, {len(failures)} failures")
    return SuiteResult(table=table, reports=reports, failures=failures)
