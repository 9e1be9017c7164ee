"""
Unit tests for tasks, task streams and class-balanced sampling.
"""

import os
import sys

import pytest
import torch

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rekall.datasets import SyntheticBlobsAdapter
from rekall.exceptions import SamplingError, TaskStreamError
from rekall.models import SplitProtocol, SyntheticBlobsSpec
from rekall.task_stream import (
    BUILTIN_SPLITS,
    ClassBalancedSampler,
    LabeledBatch,
    TaskSpec,
    build_task_stream,
    next_batch,
)


@pytest.fixture
def handle():
    """Six-class procedural dataset."""
    spec = SyntheticBlobsSpec(num_classes=6, train_per_class=10, test_per_class=4, image_size=8)
    return SyntheticBlobsAdapter(spec).load()


@pytest.fixture
def stream(handle):
    return build_task_stream("synthetic-blobs", handle=handle)


class TestBuildTaskStream:
    """Test suite for build_task_stream."""

    def test_default_blob_partition(self, stream):
        assert stream.partition() == [[0, 1], [2, 3], [4, 5]]
        assert stream.total_tasks == 3
        assert [t.task_index for t in stream.tasks] == [1, 2, 3]

    def test_odd_class_count_merges_last_task(self):
        spec = SyntheticBlobsSpec(num_classes=5, train_per_class=4, test_per_class=2, image_size=8)
        stream = build_task_stream("synthetic-blobs", handle=SyntheticBlobsAdapter(spec).load())
        assert stream.partition() == [[0, 1], [2, 3, 4]]

    def test_builtin_splits(self):
        assert BUILTIN_SPLITS["cifar10"] == [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]]
        assert BUILTIN_SPLITS["oct"] == [[3, 0], [1], [2]]
        assert BUILTIN_SPLITS["pathmnist"] == [[0, 1, 2], [3, 4, 5], [6, 7, 8]]

    def test_custom_partition(self, handle):
        protocol = SplitProtocol(kind="custom", partition=[[5, 0], [1, 2, 3]])
        stream = build_task_stream("synthetic-blobs", protocol, handle=handle)
        assert stream.partition() == [[5, 0], [1, 2, 3]]
        assert stream.seen_classes(1) == [0, 5]
        assert stream.seen_classes(2) == [0, 1, 2, 3, 5]
        assert set(stream.class_names) == {0, 1, 2, 3, 5}

    def test_overlapping_partition(self, handle):
        protocol = SplitProtocol(kind="custom", partition=[[0, 1], [1, 2]])
        with pytest.raises(TaskStreamError, match="overlapping"):
            build_task_stream("synthetic-blobs", protocol, handle=handle)

    def test_nonexistent_class(self, handle):
        protocol = SplitProtocol(kind="custom", partition=[[0, 1], [7]])
        with pytest.raises(TaskStreamError, match="nonexistent"):
            build_task_stream("synthetic-blobs", protocol, handle=handle)

    def test_splits_hold_only_task_classes(self, stream):
        for task in stream.tasks:
            allowed = torch.tensor(task.class_ids)
            assert torch.isin(task.train_split.labels, allowed).all()
            assert torch.isin(task.test_split.labels, allowed).all()
            assert task.train_split.task_index == task.task_index
            assert len(task.train_split) == 10 * task.num_classes
            assert len(task.test_split) == 4 * task.num_classes

    def test_randomized_order_keeps_sizes_and_is_seeded(self, handle):
        protocol = SplitProtocol(randomize_class_order=True)
        a = build_task_stream("synthetic-blobs", protocol, seed=3, handle=handle)
        b = build_task_stream("synthetic-blobs", protocol, seed=3, handle=handle)
        assert a.partition() == b.partition()
        assert [len(t) for t in a.partition()] == [2, 2, 2]
        assert sorted(c for t in a.partition() for c in t) == list(range(6))

    def test_per_class_caps(self, handle):
        protocol = SplitProtocol(max_train_per_class=3, max_test_per_class=1)
        stream = build_task_stream("synthetic-blobs", protocol, handle=handle)
        task = stream.task(1)
        assert len(task.train_split) == 6
        assert len(task.test_split) == 2

    def test_normalization_stats(self, stream):
        """Normalized training pixels of all tasks have zero mean per channel."""
        images = torch.cat([t.normalize(t.train_split.images) for t in stream.tasks])
        means = images.mean(dim=(0, 2, 3))
        assert torch.allclose(means, torch.zeros(3), atol=1e-4)

    def test_pooled_task(self, stream):
        pooled = stream.pooled_task(2)
        assert pooled.task_index == 2
        assert pooled.class_ids == (0, 1, 2, 3)
        assert len(pooled.train_split) == 40

    def test_iter_split_covers_everything(self, stream):
        task = stream.task(1)
        batches = list(task.iter_split("test", 3))
        assert sum(len(b) for b in batches) == len(task.test_split)
        assert batches[0].images.dtype == torch.float32


class TestTaskSpec:
    """Test suite for TaskSpec invariants."""

    def test_label_outside_class_ids(self, handle):
        with pytest.raises(TaskStreamError, match="outside"):
            TaskSpec(1, (0,), handle.train, handle.test, (0.5,) * 3, (0.2,) * 3)

    def test_train_test_leak(self, handle):
        train = handle.train.subset(torch.arange(0, 10))
        with pytest.raises(TaskStreamError, match="leaks"):
            TaskSpec(1, (0,), train, train, (0.5,) * 3, (0.2,) * 3)

    def test_index_starts_at_one(self, stream):
        task = stream.task(1)
        with pytest.raises(TaskStreamError):
            TaskSpec(0, task.class_ids, task.train_split, task.test_split, (0.5,) * 3, (0.2,) * 3)


class TestSampler:
    """Test suite for ClassBalancedSampler and next_batch."""

    def test_batch_has_two_classes_with_two_samples(self, stream):
        sampler = ClassBalancedSampler(stream.task(1), 8, torch.Generator().manual_seed(0))
        for _ in range(5):
            batch = sampler.next_batch()
            assert len(batch) == 8
            _, counts = torch.unique(batch.labels, return_counts=True)
            assert len(counts) == 2
            assert (counts >= 2).all()

    def test_labels_within_task(self, stream):
        batch = next_batch(stream.task(2), 6, torch.Generator().manual_seed(1))
        assert torch.isin(batch.labels, torch.tensor([2, 3])).all()

    def test_same_generator_state_same_batch(self, stream):
        a = next_batch(stream.task(1), 8, torch.Generator().manual_seed(5))
        b = next_batch(stream.task(1), 8, torch.Generator().manual_seed(5))
        assert torch.equal(a.images, b.images)
        assert torch.equal(a.labels, b.labels)

    def test_batch_larger_than_split(self, stream):
        with pytest.raises(SamplingError, match="exceeds"):
            ClassBalancedSampler(stream.task(1), 64, torch.Generator())

    def test_replacement_allows_large_batches(self, stream):
        sampler = ClassBalancedSampler(stream.task(1), 64, torch.Generator(), replacement=True)
        assert len(sampler.next_batch()) == 64

    def test_epoch_without_repeats(self, stream):
        """Five draws of 2 exhaust a 10-sample class permutation without repeats."""
        sampler = ClassBalancedSampler(stream.task(1), 4, torch.Generator().manual_seed(2))
        seen = []
        for _ in range(5):
            seen.append(sampler._draw(0, 2))
        flat = torch.cat(seen)
        assert len(torch.unique(flat)) == 10

    def test_single_class_task(self, handle):
        protocol = SplitProtocol(kind="custom", partition=[[0, 1], [2]])
        stream = build_task_stream("synthetic-blobs", protocol, handle=handle)
        batch = next_batch(stream.task(2), 4, torch.Generator().manual_seed(0))
        assert torch.unique(batch.labels).tolist() == [2]

    @pytest.mark.parametrize("batch_size", [3, 4, 5, 6])
    def test_small_batches_still_hold_two_classes(self, handle, batch_size):
        protocol = SplitProtocol(kind="custom", partition=[[0, 1, 2], [3, 4, 5]])
        stream = build_task_stream("synthetic-blobs", protocol, handle=handle)
        sampler = ClassBalancedSampler(
            stream.task(1), batch_size, torch.Generator().manual_seed(4)
        )
        assert sampler.classes_per_batch() >= 2
        for _ in range(10):
            batch = sampler.next_batch()
            _, counts = torch.unique(batch.labels, return_counts=True)
            assert len(batch) == batch_size
            assert len(counts) >= 2
            assert counts.max() >= 2

    def test_batch_of_two_warns_on_multi_class_task(self, stream, caplog):
        with caplog.at_level("WARNING", logger="rekall.task_stream"):
            ClassBalancedSampler(stream.task(1), 2, torch.Generator().manual_seed(0))
        assert "triplet mining may find no anchors" in caplog.text

    def test_batch_of_four_does_not_warn(self, stream, caplog):
        with caplog.at_level("WARNING", logger="rekall.task_stream"):
            ClassBalancedSampler(stream.task(1), 4, torch.Generator().manual_seed(0))
        assert "triplet mining" not in caplog.text

    def test_state_dict_resumes_sequence(self, stream):
        sampler = ClassBalancedSampler(stream.task(1), 8, torch.Generator().manual_seed(3))
        sampler.next_batch()
        state = sampler.state_dict()
        expected = sampler.next_batch()

        restored = ClassBalancedSampler(stream.task(1), 8, torch.Generator())
        restored.load_state_dict(state)
        assert torch.equal(restored.next_batch().labels, expected.labels)

    def test_augmentation_keeps_shape(self, stream):
        sampler = ClassBalancedSampler(
            stream.task(1), 8, torch.Generator().manual_seed(0), augment=True
        )
        batch = sampler.next_batch()
        assert batch.images.shape == (8, 3, 8, 8)


class TestLabeledBatch:
    """Test suite for LabeledBatch validation."""

    def test_length_mismatch(self):
        with pytest.raises(SamplingError):
            LabeledBatch(torch.zeros(3, 1, 4, 4), torch.zeros(2, dtype=torch.long))

    def test_non_finite(self):
        images = torch.zeros(2, 1, 4, 4)
        images[0, 0, 0, 0] = float("nan")
        with pytest.raises(SamplingError, match="non-finite"):
            LabeledBatch(images, torch.zeros(2, dtype=torch.long))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
