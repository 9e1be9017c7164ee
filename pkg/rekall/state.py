"""
Mutable training state shared by the trainer, checkpoints and evaluation.
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

from .audit import AccessAuditor
from .backbone import EmbeddingBackbone, build_backbone, parameter_checksum
from .exceptions import TeacherMutationError
from .generator import GeneratorState
from .metric import CentroidStore, RunningCentroids
from .models import AccuracyMatrix, RunConfig
from .task_stream import ClassBalancedSampler, TaskStream

logger = logging.getLogger(__name__)


@dataclass
class TeacherSnapshot:
    """
    Frozen copy of the student taken when a task finishes.

    :ivar task_index: Task after which the snapshot was taken
    :vartype task_index: int
    :ivar checksum: Parameter checksum at snapshot time
    :vartype checksum: str
    """

    model: EmbeddingBackbone
    task_index: int
    checksum: str

    @classmethod
    def of(cls, student: EmbeddingBackbone, task_index: int) -> "TeacherSnapshot":
        model = copy.deepcopy(student)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        return cls(model=model, task_index=task_index, checksum=parameter_checksum(model))

    def verify(self) -> None:
        """
        Compare the current parameters against the recorded checksum.

        :raises TeacherMutationError: If any parameter or buffer changed
        """
        current = parameter_checksum(self.model)
        if current != self.checksum:
            raise TeacherMutationError(
                f"teacher from task {self.task_index} changed: {self.checksum[:12]} -> "
                f"{current[:12]}"
            )


@dataclass
class RunContext:
    """Run-scoped handles that are not part of the checkpointed state."""

    stream: TaskStream | None = None
    run_dir: Path | None = None
    metrics: logging.Logger | None = None
    auditor: AccessAuditor | None = None

    @property
    def checkpoint_dir(self) -> Path | None:
        return self.run_dir / "checkpoints" if self.run_dir else None


@dataclass
class TrainerState:
    """
    Everything the incremental trainer needs to continue a run.

    ``completed_tasks`` counts finished tasks; ``epoch`` counts finished epochs
    of the task in progress (zero between tasks).
    """

    config: RunConfig
    student: EmbeddingBackbone
    optimizer: torch.optim.Optimizer
    matrix: AccuracyMatrix
    store: CentroidStore = field(default_factory=CentroidStore)
    teacher: TeacherSnapshot | None = None
    generator: GeneratorState | None = None
    completed_tasks: int = 0
    epoch: int = 0
    global_step: int = 0
    latent_rng: torch.Generator = field(default_factory=torch.Generator)
    sampler: ClassBalancedSampler | None = None
    pending_sampler_state: dict[str, Any] | None = None
    running: RunningCentroids = field(default_factory=RunningCentroids)
    metrics_lines: int = 0
    loss_curves: dict[str, list[float]] = field(default_factory=dict)
    separability: list[float | None] = field(default_factory=list)
    elapsed_seconds: float = 0.0

    @property
    def current_task(self) -> int:
        """Index k of the task being (or about to be) trained."""
        return self.completed_tasks + 1

    @property
    def device(self) -> torch.device:
        return next(self.student.parameters()).device

    def trainable_models(self) -> list[nn.Module]:
        """Models with parameters that currently require gradients."""
        models: list[nn.Module] = [self.student]
        if self.teacher is not None:
            models.append(self.teacher.model)
        return [m for m in models if any(p.requires_grad for p in m.parameters())]

    def record_losses(self, values: dict[str, float]) -> None:
        for key, value in values.items():
            self.loss_curves.setdefault(key, []).append(value)


def student_optimizer(model: nn.Module, config: RunConfig) -> torch.optim.Optimizer:
    """Adam with learning rate eta_s and the configured weight decay."""
    return torch.optim.Adam(
        model.parameters(), lr=config.student_lr, weight_decay=config.weight_decay
    )


def initial_state(
    config: RunConfig,
    in_channels: int,
    num_tasks: int,
    device: torch.device | str = "cpu",
) -> TrainerState:
    """
    Seeded starting state: fresh backbone, empty store and empty matrix.

    :param config: Run configuration
    :type config: RunConfig
    :param in_channels: Image channels of the stream
    :type in_channels: int
    :param num_tasks: K
    :type num_tasks: int
    :param device: Torch device
    :type device: Union[torch.device, str]

    :return: Initial state
    :rtype: TrainerState
    """
    student = build_backbone(in_channels, config.backbone, seed=config.seed).to(device)
    return TrainerState(
        config=config,
        student=student,
        optimizer=student_optimizer(student, config),
        matrix=AccuracyMatrix(num_tasks=num_tasks),
        latent_rng=torch.Generator().manual_seed(config.seed + 1),
    )
