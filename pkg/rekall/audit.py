"""
Access auditing for the zero-shot constraint.

Once task k starts, no sample from the training split of a task j < k may be read.
Every :class:`~rekall.datasets.ImageCollection` read is reported to the attached
auditor, which logs it and counts violations.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

from .exceptions import ZeroShotViolationError
from .logging_config import close_record_log, open_record_log

if TYPE_CHECKING:
    from .datasets import ImageCollection
    from .task_stream import TaskStream

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AccessRecord:
    """One read of a split."""

    training_task: int | None
    owner_task: int | None
    split: str
    samples: int

    @property
    def violation(self) -> bool:
        """True for a read of an earlier task's training split."""
        return (
            self.split == "train"
            and self.training_task is not None
            and self.owner_task is not None
            and self.owner_task < self.training_task
        )


class AccessAuditor:
    """
    Records split reads and enforces the zero-shot constraint.

    :ivar strict: Raise :class:`ZeroShotViolationError` on a violation instead of only logging it
    :vartype strict: bool
    :ivar records: Every read seen so far
    :vartype records: List[AccessRecord]
    """

    def __init__(self, log_path: Path | None = None, strict: bool = True):
        """
        Initialize the auditor.

        :param log_path: Optional ``audit.log`` destination (line-delimited JSON)
        :type log_path: Optional[Path]
        :param strict: Raise on violations
        :type strict: bool
        """
        self.strict = strict
        self.records: list[AccessRecord] = []
        self.current_task: int | None = None
        self._log = open_record_log(f"rekall.audit.{id(self)}", log_path) if log_path else None

    def watch(self, stream: "TaskStream") -> None:
        """
        Attach to every split of a stream.

        :param stream: Stream whose splits are audited
        :type stream: TaskStream
        """
        for task in stream.tasks:
            task.train_split.auditor = self
            task.test_split.auditor = self

    def release(self, stream: "TaskStream") -> None:
        """Detach from a stream and close the audit log."""
        for task in stream.tasks:
            if task.train_split.auditor is self:
                task.train_split.auditor = None
            if task.test_split.auditor is self:
                task.test_split.auditor = None
        if self._log is not None:
            close_record_log(self._log)
            self._log = None

    def begin_task(self, task_index: int) -> None:
        """Mark the start of training on ``task_index``."""
        self.current_task = task_index

    def record(self, collection: "ImageCollection", samples: int) -> None:
        """
        Register a read of ``samples`` items from ``collection``.

        :raises ZeroShotViolationError: In strict mode, for a past-task train read
        """
        entry = AccessRecord(
            training_task=self.current_task,
            owner_task=collection.task_index,
            split=collection.split,
            samples=samples,
        )
        self.records.append(entry)
        if self._log is not None:
            self._log.info(
                "read",
                extra={
                    "training_task": entry.training_task,
                    "owner_task": entry.owner_task,
                    "split": entry.split,
                    "samples": entry.samples,
                    "violation": entry.violation,
                },
            )
        if entry.violation:
            logger.error(
                f"Task {entry.training_task} read {samples} training samples of task "
                f"{entry.owner_task}"
            )
            if self.strict:
                raise ZeroShotViolationError(
                    f"training split of task {entry.owner_task} read during task "
                    f"{entry.training_task}"
                )

    @property
    def past_train_reads(self) -> int:
        """Number of samples read from earlier tasks' training splits."""
        return sum(r.samples for r in self.records if r.violation)
