"""
Run reports: machine-readable results, comparison tables and static plots.
"""

import json
import logging
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .evaluation import published_reference, published_table  # noqa: E402
from .exceptions import EvaluationError  # noqa: E402
from .models import AccuracyMatrix, RunReport, TrainingMode  # noqa: E402

logger = logging.getLogger(__name__)

MODE_ORDER = [m.value for m in (
    TrainingMode.FINETUNE,
    TrainingMode.FAM_ONLY,
    TrainingMode.COV_ONLY,
    TrainingMode.FULL,
    TrainingMode.JOINT,
)]


def taskwise_accuracy(matrix: AccuracyMatrix) -> list[float]:
    """A_i (mean of row i) after every completed task, as fractions."""
    return [sum(row) / len(row) for row in matrix.rows]


def _mode_key(mode: str) -> int:
    return MODE_ORDER.index(mode) if mode in MODE_ORDER else len(MODE_ORDER)


def aggregate_reports(reports: Sequence[RunReport]) -> pd.DataFrame:
    """
    Mean and sample standard deviation of A_K (%) per dataset and mode.

    :param reports: Completed run reports
    :type reports: Sequence[RunReport]

    :return: Table indexed by (dataset, mode) with columns mean, std, runs, seeds
        and the published A_K where one exists
    :rtype: pd.DataFrame
    """
    rows = [
        {
            "dataset": r.dataset,
            "mode": r.mode.value,
            "seed": r.seed,
            "A_K": 100.0 * r.average_accuracy,
        }
        for r in reports
        if r.average_accuracy is not None
    ]
    if not rows:
        raise EvaluationError("no completed runs to aggregate")
    frame = pd.DataFrame(rows)
    grouped = frame.groupby(["dataset", "mode"])
    table = pd.DataFrame(
        {
            "mean": grouped["A_K"].mean(),
            "std": grouped["A_K"].std(ddof=1).fillna(0.0),
            "runs": grouped["A_K"].count(),
            "seeds": grouped["seed"].apply(lambda s: ",".join(str(v) for v in sorted(s))),
        }
    )
    table["published"] = [published_reference(d, m) for d, m in table.index]
    table = table.reset_index()
    table["order"] = table["mode"].map(_mode_key)
    table = table.sort_values(["dataset", "order"]).drop(columns="order")
    return table.set_index(["dataset", "mode"]).round(2)


def plot_taskwise_accuracy(reports: Sequence[RunReport], path: Path) -> Path:
    """
    Grouped bars of A_i (%) per task, one bar per mode, error bars across seeds.

    :param reports: Runs over the same task stream
    :type reports: Sequence[RunReport]
    :param path: Image file to write
    :type path: Path

    :return: ``path``
    :rtype: Path
    """
    by_mode: dict[str, list[list[float]]] = {}
    for r in reports:
        by_mode.setdefault(r.mode.value, []).append(taskwise_accuracy(r.matrix))
    modes = sorted(by_mode, key=_mode_key)
    num_tasks = max(len(v) for runs in by_mode.values() for v in runs)

    fig, ax = plt.subplots(figsize=(max(4.0, 1.6 * num_tasks), 3.5))
    width = 0.8 / len(modes)
    x = np.arange(1, num_tasks + 1)
    for i, mode in enumerate(modes):
        values = np.full((len(by_mode[mode]), num_tasks), np.nan)
        for r, run in enumerate(by_mode[mode]):
            values[r, : len(run)] = 100.0 * np.asarray(run)
        mean = np.nanmean(values, axis=0)
        std = np.nanstd(values, axis=0, ddof=1) if values.shape[0] > 1 else None
        ax.bar(x - 0.4 + width * (i + 0.5), mean, width, yerr=std, capsize=2, label=mode)
    ax.set_xticks(x)
    ax.set_xlabel("task")
    ax.set_ylabel("A_k (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize="small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curves(report: RunReport, path: Path) -> Path:
    """One panel per loss component over optimization steps."""
    curves = {k: v for k, v in report.loss_curves.items() if v}
    fig, axes = plt.subplots(
        len(curves) or 1, 1, figsize=(6, 1.8 * max(len(curves), 1)), squeeze=False
    )
    for ax, (name, values) in zip(axes[:, 0], sorted(curves.items()), strict=False):
        ax.plot(values, linewidth=0.8)
        ax.set_ylabel(name)
    axes[-1, 0].set_xlabel("step")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_separability(reports: Sequence[RunReport], path: Path) -> Path:
    """Inter/intra distance ratio after each task, one line per run."""
    fig, ax = plt.subplots(figsize=(5, 3))
    for r in reports:
        ratios = [np.nan if v is None or not np.isfinite(v) else v for v in r.separability]
        ax.plot(range(1, len(ratios) + 1), ratios, marker="o", label=f"{r.mode.value} s{r.seed}")
    ax.set_xlabel("task")
    ax.set_ylabel("inter / intra")
    ax.legend(fontsize="x-small")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def emit_report(report: RunReport | Sequence[RunReport], out_dir: Path) -> list[Path]:
    """
    Write results and plots for one run or a set of runs.

    A single run produces ``results.json`` (the report, including ``matrix``,
    ``A_K``, ``mode``, ``seed`` and ``dataset``), ``taskwise_accuracy.png``,
    ``loss_curves.png`` and ``separability.png``. Several runs produce a list in
    ``results.json`` plus ``summary.csv`` and ``summary.txt`` with mean and
    sample std per mode next to the published values.

    :param report: Run report(s)
    :type report: Union[RunReport, Sequence[RunReport]]
    :param out_dir: Output directory
    :type out_dir: Path

    :return: Written files
    :rtype: List[Path]

    :raises OSError: If the directory cannot be written
    """
    reports = [report] if isinstance(report, RunReport) else list(report)
    if not reports:
        raise EvaluationError("nothing to report")
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    results = out_dir / "results.json"
    if isinstance(report, RunReport):
        report.write(results)
    else:
        payload = [json.loads(r.model_dump_json(by_alias=True)) for r in reports]
        results.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    written.append(results)

    written.append(plot_taskwise_accuracy(reports, out_dir / "taskwise_accuracy.png"))
    written.append(plot_separability(reports, out_dir / "separability.png"))
    if isinstance(report, RunReport):
        written.append(plot_loss_curves(report, out_dir / "loss_curves.png"))
    else:
        complete = [r for r in reports if r.average_accuracy is not None]
        if complete:
            summary = aggregate_reports(complete)
            summary.to_csv(out_dir / "summary.csv")
            text = summary.to_string() + "\n\nPublished A_K (%):\n" + published_table().to_string()
            (out_dir / "summary.txt").write_text(text + "\n", encoding="utf-8")
            written += [out_dir / "summary.csv", out_dir / "summary.txt"]

    logger.info(f"Wrote {len(written)} report files to {out_dir}")
    return written


def load_run_reports(run_dirs: Sequence[Path]) -> list[RunReport]:
    """
    Read ``report/results.json`` of several run directories, skipping missing ones.

    :param run_dirs: Run directories
    :type run_dirs: Sequence[Path]

    :return: Parsed reports
    :rtype: List[RunReport]
    """
    reports = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "report" / "results.json"
        if not path.exists():
            logger.warning(f"No results in {run_dir}, skipping")
            continue
        reports.append(RunReport.read(path))
    return reports
