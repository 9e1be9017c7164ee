"""
Checkpoint persistence for the incremental trainer.

A checkpoint holds the complete :class:`~rekall.state.TrainerState`: student,
teacher, generator, optimizers, centroid store, partial accuracy matrix, sampler
cursors, random generator states and the number of metrics records already
written. Files are written to a temporary name and renamed into place.
"""

import logging
import os
import pickle
from pathlib import Path
from typing import Any

import torch

from .backbone import EmbeddingBackbone
from .exceptions import CheckpointError, CheckpointVersionError
from .generator import GeneratorState
from .metric import CentroidStore
from .models import AccuracyMatrix, RunConfig
from .state import TeacherSnapshot, TrainerState, student_optimizer

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LAST_CHECKPOINT = "last.pt"


def _atomic_save(payload: dict[str, Any], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"could not write checkpoint {path}: {e}") from e


def save_checkpoint(state: TrainerState, path: Path) -> Path:
    """
    Write the full trainer state.

    :param state: State to persist
    :type state: TrainerState
    :param path: Destination file
    :type path: Path

    :return: ``path``
    :rtype: Path

    :raises CheckpointError: If the file cannot be written
    """
    generator = None
    if state.generator is not None:
        module = state.generator.module
        generator = {
            "module": module.state_dict(),
            "optimizer": state.generator.optimizer.state_dict(),
            "image_shape": list(module.image_shape),
            "mean": module.mean.flatten().tolist(),
            "std": module.std.flatten().tolist(),
            "latent_dim": module.latent_dim,
        }
    teacher = None
    if state.teacher is not None:
        teacher = {
            "model": state.teacher.model.state_dict(),
            "task_index": state.teacher.task_index,
            "checksum": state.teacher.checksum,
        }
    sampler = state.sampler.state_dict() if state.sampler is not None else None

    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": state.config.model_dump_json(by_alias=True),
        "in_channels": state.student.in_channels,
        "student": state.student.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "teacher": teacher,
        "generator": generator,
        "store": state.store.state_dict(),
        "matrix": state.matrix.model_dump(),
        "completed_tasks": state.completed_tasks,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "metrics_lines": state.metrics_lines,
        "elapsed_seconds": state.elapsed_seconds,
        "latent_rng": state.latent_rng.get_state(),
        "sampler": sampler if sampler is not None else state.pending_sampler_state,
        "running": state.running.state_dict(),
        "loss_curves": {k: list(v) for k, v in state.loss_curves.items()},
        "separability": list(state.separability),
    }
    _atomic_save(payload, path)
    logger.debug(f"Saved checkpoint {path}")
    return path


def load_checkpoint(path: Path, device: torch.device | str = "cpu") -> TrainerState:
    """
    Restore a trainer state written by :func:`save_checkpoint`.

    :param path: Checkpoint file
    :type path: Path
    :param device: Device for the restored models
    :type device: Union[torch.device, str]

    :return: Restored state; a task in progress resumes from its sampler cursors
    :rtype: TrainerState

    :raises CheckpointVersionError: For a different schema version
    :raises CheckpointError: For a missing, corrupt or inconsistent file
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (pickle.UnpicklingError, RuntimeError, EOFError, OSError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointError(f"{path} is not a rekall checkpoint")
    if payload["schema_version"] != SCHEMA_VERSION:
        raise CheckpointVersionError(
            f"checkpoint schema {payload['schema_version']} != supported {SCHEMA_VERSION}"
        )

    try:
        config = RunConfig.model_validate_json(payload["config"])
        student = EmbeddingBackbone(payload["in_channels"], config.backbone)
        student.load_state_dict(payload["student"])
        student.to(device)
        optimizer = student_optimizer(student, config)
        optimizer.load_state_dict(payload["optimizer"])

        teacher = None
        if payload["teacher"] is not None:
            teacher_model = EmbeddingBackbone(payload["in_channels"], config.backbone)
            teacher_model.load_state_dict(payload["teacher"]["model"])
            teacher = TeacherSnapshot.of(teacher_model.to(device), payload["teacher"]["task_index"])
            if teacher.checksum != payload["teacher"]["checksum"]:
                raise CheckpointError("teacher checksum does not match the saved snapshot")

        generator = None
        if payload["generator"] is not None:
            g = payload["generator"]
            generator = GeneratorState.create(
                tuple(g["image_shape"]),
                g["mean"],
                g["std"],
                lr=config.generator_lr,
                weight_decay=config.weight_decay,
                latent_dim=g["latent_dim"],
                device=device,
            )
            generator.module.load_state_dict(g["module"])
            generator.optimizer.load_state_dict(g["optimizer"])

        latent_rng = torch.Generator()
        latent_rng.set_state(payload["latent_rng"])

        state = TrainerState(
            config=config,
            student=student,
            optimizer=optimizer,
            matrix=AccuracyMatrix.model_validate(payload["matrix"]),
            store=CentroidStore.from_state_dict(payload["store"]),
            teacher=teacher,
            generator=generator,
            completed_tasks=payload["completed_tasks"],
            epoch=payload["epoch"],
            global_step=payload["global_step"],
            latent_rng=latent_rng,
            pending_sampler_state=payload["sampler"],
            metrics_lines=payload["metrics_lines"],
            loss_curves={k: list(v) for k, v in payload["loss_curves"].items()},
            separability=list(payload["separability"]),
            elapsed_seconds=payload["elapsed_seconds"],
        )
        state.running.load_state_dict(payload["running"])
    except (KeyError, ValueError, RuntimeError) as e:
        raise CheckpointError(f"inconsistent checkpoint {path}: {e}") from e

    logger.info(
        f"Loaded checkpoint {path}: {state.completed_tasks} tasks done, epoch {state.epoch}"
    )
    return state


def save_generator(state: GeneratorState, path: Path) -> Path:
    """Write the generator weights of a finished task."""
    _atomic_save({"schema_version": SCHEMA_VERSION, "module": state.module.state_dict()}, path)
    return path


def latest_checkpoint(run_dir: Path) -> Path | None:
    """The most recent checkpoint of a run directory, if any."""
    candidate = run_dir / "checkpoints" / LAST_CHECKPOINT
    return candidate if candidate.exists() else None
