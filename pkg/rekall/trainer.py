"""
Incremental trainer.

Per task k and epoch: draw one latent batch, take n_g generator steps against the
frozen teacher, then n_s student steps on real batches of task k with the
synthetic batch of that epoch for distillation. Task 1 trains on the triplet loss
alone. When a task ends its class centroids are frozen, the accuracy row is
evaluated and the student becomes the next teacher.
"""

import logging
import time
from pathlib import Path

import torch

from .audit import AccessAuditor
from .checkpoint import (
    LAST_CHECKPOINT,
    latest_checkpoint,
    load_checkpoint,
    save_checkpoint,
    save_generator,
)
from .config import Config
from .distillation import EmbeddingPair, embedding_distance, kd_loss
from .evaluation import average_accuracy, evaluate_after_task
from .exceptions import TrainerStateError, TrainingDivergedError
from .generator import (
    GeneratorState,
    generate,
    generator_step,
    sample_latent,
    save_grid,
)
from .logging_config import close_record_log, open_record_log, run_logging
from .metric import (
    CentroidStore,
    centroid_pull_loss,
    compute_centroids,
    embed,
    mine_triplets,
    triplet_loss,
)
from .models import GeneratorPolicy, RunConfig, RunReport, StepMetrics, TrainingMode
from .reporting import emit_report
from .state import RunContext, TeacherSnapshot, TrainerState, initial_state
from .task_stream import (
    ClassBalancedSampler,
    LabeledBatch,
    TaskSpec,
    TaskStream,
    build_task_stream,
)

logger = logging.getLogger(__name__)


def snapshot_teacher(state: TrainerState) -> TeacherSnapshot:
    """
    Freeze a deep copy of the student as the teacher for the next task.

    :param state: State whose current task just finished
    :type state: TrainerState

    :return: The new teacher, also stored on ``state.teacher``
    :rtype: TeacherSnapshot
    """
    state.teacher = TeacherSnapshot.of(state.student, state.current_task)
    logger.debug(f"Teacher snapshot after task {state.current_task}: {state.teacher.checksum[:12]}")
    return state.teacher


def student_objective(
    state: TrainerState,
    real_batch: LabeledBatch,
    synthetic_batch: torch.Tensor | None,
    config: RunConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """
    L = L_tri(x_k) + lambda * L_KD(x_g) + D_E(M_k(x_g), M_{k-1}(x_g)).

    Without a teacher or a synthetic batch only the current-task term is used.
    The student sees the synthetic batch in eval mode, like the teacher. The real
    batch runs in train mode, except for a replay-mode student with a teacher
    and ``freeze_norm_stats``: it stays in eval mode so the batch-norm running
    statistics remain those of the teacher. Batches with a single class
    use the centroid pull instead of the triplet loss.

    :return: (differentiable total, loss components for logging)
    :rtype: Tuple[torch.Tensor, Dict[str, float]]
    """
    student = state.student
    components: dict[str, float] = {}
    distill = (
        config.mode.uses_replay and state.teacher is not None and synthetic_batch is not None
    )

    kd_term = None
    d_e = None
    if distill:
        student.eval()
        z_s, maps_s = student(synthetic_batch)
        with torch.no_grad():
            z_t, maps_t = state.teacher.model(synthetic_batch)
        pair = EmbeddingPair(student=z_s, teacher=z_t)
        kd = kd_loss(maps_t, maps_s, pair, config.mode, config.attention_variant)
        d_e = embedding_distance(pair)
        kd_term = kd.total
        components.update(L_FAM=kd.fam.item(), L_Cov=kd.cov.item(), D_E=d_e.item())

    freeze_stats = (
        config.freeze_norm_stats and config.mode.uses_replay and state.teacher is not None
    )
    student.train(not freeze_stats)
    real_batch = real_batch.to(state.device)
    z, _ = embed(student, real_batch)
    if torch.unique(real_batch.labels).numel() >= 2:
        current, _ = triplet_loss(z, mine_triplets(z, real_batch.labels), config.margin)
    else:
        current = centroid_pull_loss(z, real_batch.labels, state.running)
    components["L_tri"] = current.item()

    total = current
    if kd_term is not None and d_e is not None:
        total = total + config.kd_weight * kd_term + d_e
    components["total"] = total.item()
    return total, components


def student_step(
    state: TrainerState,
    real_batch: LabeledBatch,
    synthetic_batch: torch.Tensor | None,
    config: RunConfig,
    context: RunContext | None = None,
) -> StepMetrics:
    """
    One Adam update of the student.

    :param state: Trainer state
    :type state: TrainerState
    :param real_batch: Batch of the current task
    :type real_batch: LabeledBatch
    :param synthetic_batch: Synthetic images x_g of this epoch, or None
    :type synthetic_batch: Optional[torch.Tensor]
    :param config: Run configuration
    :type config: RunConfig

    A batch that yields neither triplets nor distillation terms has a constant
    loss; the step is logged but the optimizer is not stepped.

    :return: Loss components of the step (before the update)
    :rtype: StepMetrics

    :raises TrainingDivergedError: On a non-finite loss
    """
    total, components = student_objective(state, real_batch, synthetic_batch, config)
    if not torch.isfinite(total):
        last = latest_checkpoint(context.run_dir) if context and context.run_dir else None
        raise TrainingDivergedError(
            f"student loss is {total.item()} at task {state.current_task}", last_checkpoint=last
        )
    if total.requires_grad:
        state.optimizer.zero_grad()
        total.backward()
        state.optimizer.step()
    else:
        # no triplet and no distillation term: nothing to update
        logger.debug(f"Task {state.current_task}: student step without gradient, skipped")
    return StepMetrics(
        event="student_step", task=state.current_task, epoch=state.epoch + 1, step=0, **components
    )


def _log_step(state: TrainerState, metrics: StepMetrics, context: RunContext | None) -> None:
    record = metrics.record()
    state.global_step += 1
    state.record_losses(
        {k: v for k, v in record.items() if k not in ("event", "task", "epoch", "step")}
    )
    if context is not None and context.metrics is not None:
        context.metrics.info(metrics.event, extra=record)
        state.metrics_lines += 1


def _prepare_task(state: TrainerState, task: TaskSpec, config: RunConfig) -> None:
    k = task.task_index
    replacement = len(task.train_split) < config.batch_size
    if replacement:
        logger.warning(
            f"Task {k} has {len(task.train_split)} training samples, fewer than the batch "
            f"size {config.batch_size}; sampling with replacement"
        )
    state.sampler = ClassBalancedSampler(
        task,
        config.batch_size,
        torch.Generator().manual_seed(config.seed * 1000 + k),
        replacement=replacement,
        augment=config.augment,
    )
    if state.pending_sampler_state is not None:
        state.sampler.load_state_dict(state.pending_sampler_state)
        state.pending_sampler_state = None
        return

    state.running.reset()
    if config.mode.uses_replay and k >= 2:
        if state.generator is None or config.generator_policy == GeneratorPolicy.PER_TASK:
            state.generator = GeneratorState.create(
                task.train_split.image_shape,
                task.channel_mean,
                task.channel_std,
                lr=config.generator_lr,
                weight_decay=config.weight_decay,
                latent_dim=config.latent_dim,
                seed=config.seed * 1000 + 500 + k,
                device=state.device,
            )
        logger.info(
            f"Task {k}: {config.synthetic_batch_size} synthetic per {config.batch_size} real "
            f"images (ratio {config.synthetic_real_ratio}), generator policy "
            f"{config.generator_policy.value}"
        )


def train_task(
    state: TrainerState,
    task: TaskSpec,
    config: RunConfig,
    context: RunContext | None = None,
) -> TrainerState:
    """
    Train the student on one task and close the task.

    Closing a task freezes its centroids, evaluates accuracy row k when the
    context carries the stream, snapshots the teacher and writes a checkpoint
    when the context has a run directory.

    :param state: State with tasks 1..k-1 completed (or task k in progress)
    :type state: TrainerState
    :param task: Task k (a pooled task in joint mode)
    :type task: TaskSpec
    :param config: Run configuration
    :type config: RunConfig
    :param context: Stream, run directory, metrics log and access auditor
    :type context: Optional[RunContext]

    :return: The updated state
    :rtype: TrainerState

    :raises TrainerStateError: For an out-of-order task or a missing teacher
    :raises TeacherMutationError: If the teacher changed during the task
    """
    k = task.task_index
    if k != state.current_task:
        raise TrainerStateError(f"expected task {state.current_task}, got task {k}")
    replay = config.mode.uses_replay and k >= 2
    if replay and state.teacher is None:
        raise TrainerStateError(f"task {k} needs the teacher from task {k - 1}")
    if context is not None and context.auditor is not None:
        context.auditor.begin_task(k)

    started = time.perf_counter()
    _prepare_task(state, task, config)
    assert state.sampler is not None
    checkpoint_dir = context.checkpoint_dir if context is not None else None

    for epoch in range(state.epoch, config.epochs):
        synthetic = None
        if replay and state.generator is not None and state.teacher is not None:
            z = sample_latent(config.synthetic_batch_size, state.latent_rng, config.latent_dim)
            for s in range(config.generator_steps):
                loss_g = generator_step(
                    state.generator, state.student, state.teacher.model, z
                )
                metrics = StepMetrics(
                    event="generator_step", task=k, epoch=epoch + 1, step=s + 1, L_G=loss_g
                )
                _log_step(state, metrics, context)
            with torch.no_grad():
                synthetic = generate(state.generator, z)
            if config.dump_synthetic_grids and context is not None and context.run_dir:
                save_grid(
                    synthetic,
                    state.generator.module,
                    context.run_dir / "synthetic" / f"task{k:02d}-epoch{epoch + 1:03d}.png",
                )

        for s in range(config.student_steps):
            metrics = student_step(state, state.sampler.next_batch(), synthetic, config, context)
            _log_step(state, metrics.model_copy(update={"step": s + 1}), context)

        state.epoch = epoch + 1
        if state.teacher is not None:
            state.teacher.verify()
        if checkpoint_dir is not None and state.epoch % config.checkpoint_every == 0:
            state.elapsed_seconds += time.perf_counter() - started
            started = time.perf_counter()
            save_checkpoint(state, checkpoint_dir / LAST_CHECKPOINT)

    if state.teacher is not None:
        state.teacher.verify()

    if config.mode == TrainingMode.JOINT:
        state.store = CentroidStore()
    compute_centroids(state.student, task, state.store, config.eval_batch_size)
    if context is not None and context.stream is not None:
        evaluate_after_task(state, context.stream, k)
    if config.mode.uses_replay:
        snapshot_teacher(state)

    state.completed_tasks = k
    state.epoch = 0
    state.sampler = None
    state.elapsed_seconds += time.perf_counter() - started
    if checkpoint_dir is not None:
        save_checkpoint(state, checkpoint_dir / LAST_CHECKPOINT)
        save_checkpoint(state, checkpoint_dir / f"task{k:02d}.pt")
        if state.generator is not None:
            save_generator(state.generator, checkpoint_dir / f"generator-task{k:02d}.pt")
    logger.info(f"Finished task {k} ({state.elapsed_seconds:.1f}s elapsed)")
    return state


def build_report(state: TrainerState, stream: TaskStream) -> RunReport:
    """Summarize a state as a run report."""
    complete = state.matrix.completed_tasks == state.matrix.num_tasks
    return RunReport(
        dataset=stream.dataset_name,
        mode=state.config.mode,
        seed=state.config.seed,
        average_accuracy=average_accuracy(state.matrix) if complete else None,
        matrix=state.matrix,
        loss_curves=state.loss_curves,
        separability=state.separability,
        wall_clock_seconds=state.elapsed_seconds,
        seeds=[state.config.seed],
        config=state.config,
    )


class IncrementalTrainer:
    """
    Runs a configuration end to end inside its run directory.

    The run directory holds ``config.snapshot``, ``metrics.log``, ``audit.log``,
    ``checkpoints/``, ``centroids.bin`` and ``report/``.
    """

    def __init__(self, config: RunConfig, stream: TaskStream | None = None):
        """
        Initialize the trainer.

        :param config: Run configuration
        :type config: RunConfig
        :param stream: Prebuilt task stream, built from the configuration if omitted
        :type stream: Optional[TaskStream]
        """
        self.config = config
        self.stream = stream

    def _stream(self) -> TaskStream:
        if self.stream is None:
            self.stream = build_task_stream(
                self.config.dataset,
                self.config.protocol,
                self.config.seed,
                data_root=self.config.data_root,
                synthetic=self.config.synthetic,
                image_folder=self.config.image_folder,
            )
        return self.stream

    def run(self, resume: Path | None = None, emit: bool = True) -> RunReport:
        """
        Train every remaining task and write the run artifacts.

        :param resume: Checkpoint to continue from
        :type resume: Optional[Path]
        :param emit: Write ``report/`` (results and plots)
        :type emit: bool

        :return: Run report
        :rtype: RunReport
        """
        stream = self._stream()
        device = Config.resolve_device(self.config.device)

        if resume is not None:
            state = load_checkpoint(resume, device)
            if state.config.model_dump() != self.config.model_dump():
                logger.warning("Resuming with the configuration stored in the checkpoint")
            config = state.config
        else:
            config = self.config
            state = initial_state(config, stream.image_shape[0], stream.total_tasks, device)

        run_dir = config.run_dir
        run_dir.mkdir(parents=True, exist_ok=True)
        config.to_file(run_dir / "config.snapshot")
        with run_logging(config.run_name):
            return self._train(state, config, stream, device, emit)

    def _train(
        self,
        state: TrainerState,
        config: RunConfig,
        stream: TaskStream,
        device: str,
        emit: bool,
    ) -> RunReport:
        run_dir = config.run_dir
        metrics = open_record_log(
            f"rekall.metrics.{run_dir.resolve()}",
            run_dir / "metrics.log",
            truncate_to=state.metrics_lines,
        )
        auditor = None
        if config.mode != TrainingMode.JOINT:
            auditor = AccessAuditor(run_dir / "audit.log", strict=config.strict_zero_shot)
            auditor.watch(stream)
        context = RunContext(stream=stream, run_dir=run_dir, metrics=metrics, auditor=auditor)

        logger.info(
            f"Run {config.run_name}: {stream.dataset_name}, mode {config.mode.value}, "
            f"K={stream.total_tasks}, device {device}"
        )
        try:
            for k in range(state.current_task, stream.total_tasks + 1):
                task = stream.pooled_task(k) if config.mode == TrainingMode.JOINT else stream.task(k)
                train_task(state, task, config, context)
        finally:
            if auditor is not None:
                auditor.release(stream)
            close_record_log(metrics)

        state.store.save(run_dir / "centroids.bin")
        report = build_report(state, stream)
        if emit:
            emit_report(report, run_dir / "report")
        else:
            report.write(run_dir / "report" / "results.json")
        if report.average_accuracy is not None:
            logger.info(f"Run {config.run_name}: A_K = {100 * report.average_accuracy:.2f}%")
        return report


def run_experiment(
    config: RunConfig, resume: Path | None = None, stream: TaskStream | None = None
) -> RunReport:
    """Convenience wrapper around :class:`IncrementalTrainer`."""
    return IncrementalTrainer(config, stream).run(resume=resume)
