"""
Class-incremental evaluation.

After task i every test split of tasks 1..i is classified by nearest class mean
over the full centroid store, so all classes seen so far compete. Published
reference results are kept here as constants for side-by-side display; they are
never recomputed.
"""

import logging

import pandas as pd
import torch

from .exceptions import EvaluationError, SeparabilityError
from .metric import embed_batches, ncm_classify, separability_report
from .models import AccuracyMatrix
from .state import TrainerState
from .task_stream import TaskStream

logger = logging.getLogger(__name__)

# Published A_K (%) on PI-CAI (two tasks, ISUP grades)
PUBLISHED_PICAI: dict[str, float] = {"joint": 83.21, "finetune": 26.25, "full": 68.73}

# Published A_K (%) per method and dataset
PUBLISHED_COMPARISON: dict[str, dict[str, float]] = {
    "joint": {"oct": 90.76, "pathmnist": 89.28, "cifar10": 88.01},
    "finetune": {"oct": 33.33, "pathmnist": 28.89, "cifar10": 32.20},
    "LwF": {"oct": 44.8, "pathmnist": 25.20, "cifar10": 32.90},
    "GR": {"oct": 35.83, "pathmnist": 21.95, "cifar10": 31.50},
    "RWalk": {"oct": 33.33, "pathmnist": 27.05, "cifar10": 35.00},
    "OWM": {"oct": 38.93, "pathmnist": 52.42, "cifar10": 48.30},
    "EFT": {"oct": 43.20, "pathmnist": 66.82, "cifar10": 60.65},
    "BIR": {"oct": 62.00, "pathmnist": 35.17, "cifar10": 64.68},
    "full": {"oct": 64.43, "pathmnist": 53.75, "cifar10": 67.23},
}

# Published A_K (%) of the distillation ablation
PUBLISHED_ABLATION: dict[str, dict[str, float]] = {
    "oct": {"finetune": 33.33, "fam_only": 47.38, "cov_only": 49.65, "full": 64.43},
    "cifar10": {"finetune": 32.20, "fam_only": 44.21, "cov_only": 46.14, "full": 67.23},
}


def published_reference(dataset: str, mode: str) -> float | None:
    """
    Published A_K (%) for a dataset and training mode, if one exists.

    :param dataset: Dataset identifier (``picai`` for the prostate MRI results)
    :type dataset: str
    :param mode: Training mode value
    :type mode: str

    :return: Published percentage or None
    :rtype: Optional[float]
    """
    if dataset == "picai":
        return PUBLISHED_PICAI.get(mode)
    if mode in PUBLISHED_ABLATION.get(dataset, {}):
        return PUBLISHED_ABLATION[dataset][mode]
    return PUBLISHED_COMPARISON.get(mode, {}).get(dataset)


def published_table() -> pd.DataFrame:
    """Published comparison results, methods as rows and datasets as columns."""
    table = pd.DataFrame(PUBLISHED_COMPARISON).T
    table["picai"] = pd.Series(PUBLISHED_PICAI)
    table.index.name = "method (published)"
    return table[["picai", "oct", "pathmnist", "cifar10"]]


def _test_accuracies(
    state: TrainerState, stream: TaskStream, i: int, batch_size: int
) -> tuple[list[float], list[int], torch.Tensor, torch.Tensor]:
    seen = stream.seen_classes(i)
    missing = [c for c in seen if c not in state.store]
    if missing:
        raise EvaluationError(f"no centroid for seen classes {missing}")
    extra = sorted(set(state.store.classes) - set(seen))
    if extra:
        raise EvaluationError(f"centroids of unseen classes {extra} in the store")

    accuracies, counts = [], []
    all_z, all_labels = [], []
    for j in range(1, i + 1):
        task = stream.task(j)
        if len(task.test_split) == 0:
            raise EvaluationError(f"task {j} has an empty test split")
        z, labels = embed_batches(state.student, task.iter_split("test", batch_size))
        predictions = ncm_classify(z, state.store)
        accuracies.append(float((predictions == labels).double().mean().item()))
        counts.append(int(labels.shape[0]))
        all_z.append(z)
        all_labels.append(labels)
    return accuracies, counts, torch.cat(all_z), torch.cat(all_labels)


def evaluate_after_task(
    state: TrainerState, stream: TaskStream, i: int, batch_size: int | None = None
) -> list[float]:
    """
    Fill row i of the accuracy matrix.

    Also appends the separability ratio of the test embeddings of every seen
    class to ``state.separability`` (None when undefined).

    :param state: Trainer state after task i and its centroid freeze
    :type state: TrainerState
    :param stream: Task stream
    :type stream: TaskStream
    :param i: Task just completed
    :type i: int
    :param batch_size: Embedding batch size, ``config.eval_batch_size`` by default
    :type batch_size: Optional[int]

    :return: a_{i,1..i} as fractions
    :rtype: List[float]

    :raises EvaluationError: Out-of-order row, missing centroids or an empty test split
    """
    if state.matrix.completed_tasks != i - 1:
        raise EvaluationError(
            f"row {i} requested but the matrix has {state.matrix.completed_tasks} rows"
        )
    accuracies, counts, z, labels = _test_accuracies(
        state, stream, i, batch_size or state.config.eval_batch_size
    )
    state.matrix.append_row(accuracies, counts)
    try:
        ratio = separability_report(z, labels).ratio
    except SeparabilityError as e:
        logger.warning(f"Separability undefined after task {i}: {e}")
        ratio = None
    state.separability.append(ratio)

    logger.info(
        f"After task {i}: "
        + ", ".join(f"a[{i},{j}]={100 * a:.2f}%" for j, a in enumerate(accuracies, 1))
    )
    return accuracies


def average_accuracy(matrix: AccuracyMatrix) -> float:
    """
    A_K: unweighted mean of the final row.

    :param matrix: Completed accuracy matrix
    :type matrix: AccuracyMatrix

    :return: A_K as a fraction
    :rtype: float

    :raises EvaluationError: If row K is missing
    """
    if matrix.completed_tasks != matrix.num_tasks:
        raise EvaluationError(
            f"final row missing: {matrix.completed_tasks} of {matrix.num_tasks} rows"
        )
    last = matrix.rows[-1]
    return sum(last) / len(last)


def recompute_final_row(
    state: TrainerState, stream: TaskStream, batch_size: int | None = None
) -> list[float]:
    """
    Re-evaluate the last completed row from a restored state, without mutating it.

    :param state: State restored from a checkpoint
    :type state: TrainerState
    :param stream: The run's task stream
    :type stream: TaskStream
    :param batch_size: Embedding batch size
    :type batch_size: Optional[int]

    :return: a_{i,1..i} for i = completed tasks
    :rtype: List[float]

    :raises EvaluationError: If no task has completed
    """
    i = state.completed_tasks
    if i < 1:
        raise EvaluationError("no completed task to evaluate")
    accuracies, _, _, _ = _test_accuracies(
        state, stream, i, batch_size or state.config.eval_batch_size
    )
    return accuracies
