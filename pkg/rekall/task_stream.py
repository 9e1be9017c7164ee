"""
The incremental-learning data model.

A :class:`TaskStream` is an ordered sequence of :class:`TaskSpec` objects over
pairwise disjoint class subsets. :func:`build_task_stream` partitions a loaded
dataset into tasks, and :class:`ClassBalancedSampler` draws the mini-batches used
for triplet mining.
"""

import logging
import random
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import Any

import torch
import torch.nn.functional as F

from .datasets import DatasetHandle, DatasetRegistry, ImageCollection
from .exceptions import SamplingError, TaskStreamError
from .models import ImageFolderSpec, SplitProtocol, SyntheticBlobsSpec

logger = logging.getLogger(__name__)

# Built-in task partitions (ordered class-id lists per task)
BUILTIN_SPLITS: dict[str, list[list[int]]] = {
    "cifar10": [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]],
    "oct": [[3, 0], [1], [2]],  # {Normal, CNV}, {DME}, {Drusen}
    "pathmnist": [[0, 1, 2], [3, 4, 5], [6, 7, 8]],
}


@dataclass
class LabeledBatch:
    """
    Normalized images with their global class ids.

    :ivar images: float tensor (batch, C, H, W)
    :vartype images: torch.Tensor
    :ivar labels: int64 tensor (batch,)
    :vartype labels: torch.Tensor
    """

    images: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise SamplingError("images and labels must have equal leading dimension")
        if not torch.isfinite(self.images).all():
            raise SamplingError("batch contains non-finite pixel values")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def to(self, device: torch.device | str) -> "LabeledBatch":
        """Move the batch to ``device``."""
        return LabeledBatch(self.images.to(device), self.labels.to(device))


@dataclass(frozen=True)
class TaskSpec:
    """
    One task: a class subset with its train and held-out test splits.

    :ivar task_index: k >= 1
    :vartype task_index: int
    :ivar class_ids: Global class ids of the task, in task order
    :vartype class_ids: Tuple[int, ...]
    :ivar channel_mean: Per-channel normalization mean (pixel scale [0, 1])
    :vartype channel_mean: Tuple[float, ...]
    :ivar channel_std: Per-channel normalization std
    :vartype channel_std: Tuple[float, ...]
    """

    task_index: int
    class_ids: tuple[int, ...]
    train_split: ImageCollection
    test_split: ImageCollection
    channel_mean: tuple[float, ...]
    channel_std: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.task_index < 1:
            raise TaskStreamError("task_index starts at 1")
        if not self.class_ids or len(set(self.class_ids)) != len(self.class_ids):
            raise TaskStreamError("class_ids must be a non-empty set")
        allowed = torch.tensor(self.class_ids)
        for split in (self.train_split, self.test_split):
            if not torch.isin(split.labels, allowed).all():
                raise TaskStreamError(
                    f"task {self.task_index} {split.split} split has labels outside {self.class_ids}"
                )
        if torch.isin(self.train_split.sample_ids, self.test_split.sample_ids).any():
            raise TaskStreamError(f"task {self.task_index} leaks test samples into train")

    @property
    def num_classes(self) -> int:
        """Number of classes C_k."""
        return len(self.class_ids)

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        """
        Convert uint8 images to normalized float tensors.

        :param images: uint8 tensor (N, C, H, W)
        :type images: torch.Tensor

        :return: float32 tensor normalized per channel
        :rtype: torch.Tensor
        """
        mean = torch.tensor(self.channel_mean).view(1, -1, 1, 1)
        std = torch.tensor(self.channel_std).view(1, -1, 1, 1)
        return (images.float() / 255.0 - mean) / std

    def iter_split(self, split: str, batch_size: int) -> Iterator[LabeledBatch]:
        """
        Iterate over a split in storage order.

        :param split: ``train`` or ``test``
        :type split: str
        :param batch_size: Batch size
        :type batch_size: int

        :return: Iterator over normalized batches
        :rtype: Iterator[LabeledBatch]
        """
        collection = self.train_split if split == "train" else self.test_split
        for start in range(0, len(collection), batch_size):
            indices = torch.arange(start, min(start + batch_size, len(collection)))
            images, labels = collection.read(indices)
            yield LabeledBatch(self.normalize(images), labels)


@dataclass
class TaskStream:
    """
    Ordered tasks over disjoint class subsets.

    :ivar image_shape: (channels, height, width)
    :vartype image_shape: Tuple[int, int, int]
    :ivar class_names: class id to human-readable label
    :vartype class_names: Dict[int, str]
    """

    tasks: list[TaskSpec]
    dataset_name: str
    image_shape: tuple[int, int, int]
    class_names: dict[int, str]
    channel_mean: tuple[float, ...]
    channel_std: tuple[float, ...]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.tasks:
            raise TaskStreamError("a task stream needs at least one task")
        for expected, task in enumerate(self.tasks, start=1):
            if task.task_index != expected:
                raise TaskStreamError("tasks must be indexed 1..K contiguously")
        seen: set[int] = set()
        for task in self.tasks:
            overlap = seen & set(task.class_ids)
            if overlap:
                raise TaskStreamError(f"class ids {sorted(overlap)} appear in several tasks")
            seen |= set(task.class_ids)

    @property
    def total_tasks(self) -> int:
        """K."""
        return len(self.tasks)

    def task(self, index: int) -> TaskSpec:
        """Task with 1-based ``index``."""
        return self.tasks[index - 1]

    def seen_classes(self, through: int) -> list[int]:
        """Sorted union of the classes of tasks 1..through."""
        return sorted(c for t in self.tasks[:through] for c in t.class_ids)

    def partition(self) -> list[list[int]]:
        """Class ids per task."""
        return [list(t.class_ids) for t in self.tasks]

    def pooled_task(self, through: int) -> TaskSpec:
        """
        A single task pooling the data of tasks 1..through (joint training).

        :param through: Last task included
        :type through: int

        :return: Pooled task indexed ``through``
        :rtype: TaskSpec
        """
        parts = self.tasks[:through]
        return TaskSpec(
            task_index=through,
            class_ids=tuple(c for t in parts for c in t.class_ids),
            train_split=ImageCollection.concat([t.train_split for t in parts], through),
            test_split=ImageCollection.concat([t.test_split for t in parts], through),
            channel_mean=self.channel_mean,
            channel_std=self.channel_std,
        )


class ClassBalancedSampler:
    """
    Draws P classes x Q samples per batch from a task's training split.

    Every class keeps its own seeded permutation and cursor; a permutation is
    redrawn when it cannot serve the next request, which is the per-epoch
    reshuffle. With at least two classes and ``batch_size >= 4`` each batch holds
    two or more classes with two or more samples each, so batch-hard mining always
    finds anchors.

    :ivar replacement: Allow a class to contribute more samples than it has
    :vartype replacement: bool
    """

    def __init__(
        self,
        task: TaskSpec,
        batch_size: int,
        generator: torch.Generator,
        replacement: bool = False,
        augment: bool = False,
    ):
        """
        Initialize the sampler.

        :param task: Task whose training split is sampled
        :type task: TaskSpec
        :param batch_size: Samples per batch (b)
        :type batch_size: int
        :param generator: Seeded source of randomness
        :type generator: torch.Generator
        :param replacement: Sample with replacement
        :type replacement: bool
        :param augment: Apply random horizontal flip and padded crop
        :type augment: bool

        :raises SamplingError: For an empty split or an oversized batch without replacement
        """
        if batch_size < 1:
            raise SamplingError("batch_size must be at least 1")
        if len(task.train_split) == 0:
            raise SamplingError(f"task {task.task_index} has an empty training split")
        if not replacement and batch_size > len(task.train_split):
            raise SamplingError(
                f"batch_size {batch_size} exceeds the {len(task.train_split)} training "
                "samples of the split without replacement"
            )
        self.task = task
        self.batch_size = batch_size
        self.generator = generator
        self.replacement = replacement
        self.augment = augment
        self._members = task.train_split.class_indices()
        self._perms: dict[int, torch.Tensor] = {}
        self._cursors: dict[int, int] = {}
        if len(self._members) >= 2 and batch_size < 4:
            logger.warning(
                f"Task {task.task_index}: batch size {batch_size} cannot hold two samples "
                "of two classes; triplet mining may find no anchors"
            )

    def classes_per_batch(self) -> int:
        """P: at least two classes whenever the task and the batch size allow it."""
        if self.batch_size < 3:
            return 1
        return min(len(self._members), max(2, self.batch_size // 2))

    def _allocate(self) -> dict[int, int]:
        classes = sorted(self._members)
        sizes = {c: len(self._members[c]) for c in classes}
        p = self.classes_per_batch()
        if p < len(classes):
            order = torch.randperm(len(classes), generator=self.generator)[:p].tolist()
            chosen = [classes[i] for i in sorted(order)]
        else:
            chosen = classes

        def capacity(c: int) -> int:
            return self.batch_size if self.replacement else sizes[c]

        allocation = {c: min(self.batch_size // p, capacity(c)) for c in chosen}
        remaining = self.batch_size - sum(allocation.values())
        pool = chosen + [c for c in classes if c not in chosen]
        while remaining > 0:
            progressed = False
            for c in pool:
                if remaining == 0:
                    break
                if allocation.get(c, 0) < capacity(c):
                    allocation[c] = allocation.get(c, 0) + 1
                    remaining -= 1
                    progressed = True
            if not progressed:
                raise SamplingError("not enough samples to fill the batch")
        return {c: k for c, k in allocation.items() if k > 0}

    def _draw(self, class_id: int, k: int) -> torch.Tensor:
        members = self._members[class_id]
        n = len(members)
        if k > n:
            picks = torch.randint(n, (k,), generator=self.generator)
            return members[picks]
        cursor = self._cursors.get(class_id, n)
        if class_id not in self._perms or cursor + k > n:
            self._perms[class_id] = torch.randperm(n, generator=self.generator)
            cursor = 0
        picked = members[self._perms[class_id][cursor : cursor + k]]
        self._cursors[class_id] = cursor + k
        return picked

    def _augment(self, images: torch.Tensor) -> torch.Tensor:
        n, _, h, w = images.shape
        flip = torch.rand(n, generator=self.generator) < 0.5
        images = torch.where(flip.view(-1, 1, 1, 1), images.flip(-1), images)
        padded = F.pad(images, (4, 4, 4, 4), mode="reflect")
        offsets = torch.randint(0, 9, (n, 2), generator=self.generator)
        return torch.stack(
            [padded[i, :, y : y + h, x : x + w] for i, (y, x) in enumerate(offsets.tolist())]
        )

    def next_batch(self) -> LabeledBatch:
        """
        Draw the next class-balanced batch.

        :return: Normalized batch with labels from ``task.class_ids``
        :rtype: LabeledBatch
        """
        allocation = self._allocate()
        indices = torch.cat([self._draw(c, k) for c, k in sorted(allocation.items())])
        indices = indices[torch.randperm(len(indices), generator=self.generator)]
        images, labels = self.task.train_split.read(indices)
        normalized = self.task.normalize(images)
        if self.augment:
            normalized = self._augment(normalized)
        return LabeledBatch(normalized, labels)

    def state_dict(self) -> dict[str, Any]:
        """Cursor state and generator state, for checkpointing."""
        return {
            "generator": self.generator.get_state(),
            "perms": {c: p.clone() for c, p in self._perms.items()},
            "cursors": dict(self._cursors),
        }

    def load_state_dict(self, state: dict[str, Any]) -> None:
        """Restore a state produced by :meth:`state_dict`."""
        self.generator.set_state(state["generator"])
        self._perms = {int(c): p.clone() for c, p in state["perms"].items()}
        self._cursors = {int(c): int(v) for c, v in state["cursors"].items()}


def next_batch(task: TaskSpec, batch_size: int, rng: torch.Generator) -> LabeledBatch:
    """
    Draw one class-balanced batch from ``task``'s training split.

    Repeating the call with a generator in the same state returns the same batch.

    :param task: Task to sample from
    :type task: TaskSpec
    :param batch_size: Batch size
    :type batch_size: int
    :param rng: Seeded generator
    :type rng: torch.Generator

    :return: Normalized batch
    :rtype: LabeledBatch
    """
    return ClassBalancedSampler(task, batch_size, rng).next_batch()


def _default_partition(handle: DatasetHandle) -> list[list[int]]:
    if handle.name in BUILTIN_SPLITS:
        return [list(t) for t in BUILTIN_SPLITS[handle.name]]
    if handle.name == "synthetic-blobs":
        classes = sorted(handle.class_names)
        tasks = [classes[i : i + 2] for i in range(0, len(classes), 2)]
        if len(tasks) > 1 and len(tasks[-1]) == 1:
            tasks[-2].extend(tasks.pop())
        return tasks
    raise TaskStreamError(
        f"dataset {handle.name!r} has no built-in split; supply a custom partition"
    )


def _validate_partition(partition: list[list[int]], universe: set[int]) -> None:
    flat = [c for task in partition for c in task]
    unknown = sorted(set(flat) - universe)
    if unknown:
        raise TaskStreamError(f"partition references nonexistent class ids {unknown}")
    if len(flat) != len(set(flat)):
        raise TaskStreamError("partition has overlapping class sets")


def _channel_stats(
    collection: ImageCollection, classes: list[int]
) -> tuple[tuple[float, ...], tuple[float, ...]]:
    mask = torch.isin(collection.labels, torch.tensor(classes))
    pixels = collection.images[mask].to(torch.float64) / 255.0
    mean = pixels.mean(dim=(0, 2, 3))
    std = pixels.std(dim=(0, 2, 3)).clamp_min(1e-6)
    return tuple(mean.tolist()), tuple(std.tolist())


def _capped(
    collection: ImageCollection, classes: list[int], cap: int | None, generator: torch.Generator
) -> torch.Tensor:
    members = collection.class_indices()
    picked = []
    for c in classes:
        idx = members.get(c, torch.empty(0, dtype=torch.long))
        if cap is not None and len(idx) > cap:
            idx = idx[torch.randperm(len(idx), generator=generator)[:cap]]
        picked.append(idx)
    return torch.sort(torch.cat(picked)).values


def build_task_stream(
    dataset_name: str,
    protocol: SplitProtocol | None = None,
    seed: int = 0,
    data_root: Any = None,
    handle: DatasetHandle | None = None,
    synthetic: SyntheticBlobsSpec | None = None,
    image_folder: ImageFolderSpec | None = None,
) -> TaskStream:
    """
    Partition a dataset into an ordered task stream.

    :param dataset_name: cifar10, oct, pathmnist, synthetic-blobs or image-folder
    :type dataset_name: str
    :param protocol: Split protocol (built-in split by default)
    :type protocol: Optional[SplitProtocol]
    :param seed: Seed of the class-order permutation and per-class caps
    :type seed: int
    :param data_root: Dataset root override
    :type data_root: Optional[Union[Path, str]]
    :param handle: Already loaded dataset (skips the adapter)
    :type handle: Optional[DatasetHandle]
    :param synthetic: Fixture shape for synthetic-blobs
    :type synthetic: Optional[SyntheticBlobsSpec]
    :param image_folder: Folder layout for image-folder
    :type image_folder: Optional[ImageFolderSpec]

    :return: Task stream
    :rtype: TaskStream

    :raises DatasetError: For unknown datasets
    :raises TaskStreamError: For invalid or overlapping partitions
    """
    protocol = protocol or SplitProtocol()
    if handle is None:
        adapter = DatasetRegistry.get_adapter(
            dataset_name,
            data_root=data_root,
            synthetic=synthetic,
            image_folder=image_folder,
            test_fraction=protocol.test_fraction,
        )
        handle = adapter.load()

    universe = set(handle.class_names)
    if protocol.kind == "custom":
        partition = [list(t) for t in protocol.partition or []]
    else:
        partition = _default_partition(handle)
    _validate_partition(partition, universe)

    if protocol.randomize_class_order:
        order = [c for task in partition for c in task]
        random.Random(seed).shuffle(order)
        sizes = [len(t) for t in partition]
        partition, start = [], 0
        for size in sizes:
            partition.append(order[start : start + size])
            start += size

    all_classes = [c for task in partition for c in task]
    mean, std = _channel_stats(handle.train, all_classes)
    generator = torch.Generator().manual_seed(seed)

    tasks = []
    for k, class_ids in enumerate(partition, start=1):
        train_idx = _capped(handle.train, class_ids, protocol.max_train_per_class, generator)
        test_idx = _capped(handle.test, class_ids, protocol.max_test_per_class, generator)
        tasks.append(
            TaskSpec(
                task_index=k,
                class_ids=tuple(class_ids),
                train_split=handle.train.subset(train_idx, task_index=k),
                test_split=handle.test.subset(test_idx, task_index=k),
                channel_mean=mean,
                channel_std=std,
            )
        )
        logger.debug(
            f"Task {k}: classes {class_ids}, {len(train_idx)} train, {len(test_idx)} test"
        )

    stream = TaskStream(
        tasks=tasks,
        dataset_name=handle.name,
        image_shape=handle.image_shape,
        class_names={c: handle.class_names[c] for c in all_classes},
        channel_mean=mean,
        channel_std=std,
        metadata={"seed": seed, "skipped_files": handle.skipped},
    )
    logger.info(
        f"Built {handle.name} stream: K={stream.total_tasks}, partition {stream.partition()}"
    )
    return stream
