"""
Unit tests for embeddings, triplet mining, centroids and NCM classification.
"""

import itertools
import os
import sys

import pytest
import torch

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rekall.backbone import EmbeddingBackbone, build_backbone, parameter_checksum
from rekall.datasets import SyntheticBlobsAdapter
from rekall.exceptions import (
    CentroidStoreError,
    NonFiniteError,
    SeparabilityError,
    ShapeMismatchError,
)
from rekall.metric import (
    CentroidStore,
    RunningCentroids,
    Triplet,
    centroid_pull_loss,
    compute_centroids,
    embed,
    embed_batches,
    mine_triplets,
    ncm_classify,
    separability_report,
    triplet_loss,
)
from rekall.models import BackboneConfig, SyntheticBlobsSpec
from rekall.task_stream import LabeledBatch, TaskSpec, build_task_stream

TOY_LAYOUT = BackboneConfig(widths=(8, 16), blocks=(1, 1))
ORACLE_CASES = 200


@pytest.fixture
def toy_model():
    """Two-stage backbone with 16-dimensional embeddings."""
    return build_backbone(3, TOY_LAYOUT, seed=0)


@pytest.fixture
def stream():
    spec = SyntheticBlobsSpec(num_classes=4, train_per_class=6, test_per_class=3, image_size=8)
    return build_task_stream("synthetic-blobs", handle=SyntheticBlobsAdapter(spec).load())


def random_labeled_embeddings(generator):
    """Float64 embeddings of 2 to 16 rows and 1 to 32 dimensions over 1 to 5 classes."""
    n = int(torch.randint(2, 17, (1,), generator=generator))
    d = int(torch.randint(1, 33, (1,), generator=generator))
    num_classes = int(torch.randint(1, 6, (1,), generator=generator))
    z = torch.randn(n, d, generator=generator, dtype=torch.float64)
    labels = torch.randint(0, num_classes, (n,), generator=generator)
    return z, labels


def _squared_distance(u, v):
    return sum((x - y) ** 2 for x, y in zip(u, v, strict=True))


def _oracle_hardest(z, labels):
    """Exhaustive per-anchor search for the hardest positive and negative."""
    n = len(labels)
    rows = z.tolist()
    d = [[_squared_distance(rows[i], rows[j]) for j in range(n)] for i in range(n)]
    result = {}
    for a in range(n):
        positives = [p for p in range(n) if p != a and labels[p] == labels[a]]
        negatives = [q for q in range(n) if labels[q] != labels[a]]
        if not positives or not negatives:
            continue
        result[a] = (max(positives, key=lambda p: d[a][p]), min(negatives, key=lambda q: d[a][q]))
    return result


class TestBackbone:
    """Test suite for the embedding backbone."""

    def test_default_is_512_dimensional(self):
        model = EmbeddingBackbone(3).eval()
        z, maps = model(torch.randn(2, 3, 32, 32))
        assert z.shape == (2, 512)
        assert len(maps) == model.num_taps == 9

    def test_toy_layout_taps(self, toy_model):
        toy_model.eval()
        z, maps = toy_model(torch.randn(4, 3, 8, 8))
        assert z.shape == (4, 16)
        assert [tuple(m.shape[1:]) for m in maps] == [(8, 8, 8), (8, 8, 8), (16, 4, 4)]

    def test_wrong_channels(self, toy_model):
        with pytest.raises(ShapeMismatchError):
            toy_model(torch.randn(2, 1, 8, 8))

    def test_seeded_build_is_reproducible(self):
        a = build_backbone(3, TOY_LAYOUT, seed=7)
        b = build_backbone(3, TOY_LAYOUT, seed=7)
        c = build_backbone(3, TOY_LAYOUT, seed=8)
        assert parameter_checksum(a) == parameter_checksum(b)
        assert parameter_checksum(a) != parameter_checksum(c)

    def test_seeded_build_leaves_global_rng(self):
        torch.manual_seed(0)
        expected = torch.rand(1)
        torch.manual_seed(0)
        build_backbone(3, TOY_LAYOUT, seed=3)
        assert torch.equal(torch.rand(1), expected)


class TestEmbed:
    """Test suite for embed."""

    def test_singleton_batch(self, toy_model):
        toy_model.eval()
        z, _ = embed(toy_model, LabeledBatch(torch.randn(1, 3, 8, 8), torch.tensor([0])))
        assert z.shape == (1, 16)

    def test_deterministic_in_eval(self, toy_model):
        toy_model.eval()
        batch = LabeledBatch(torch.randn(4, 3, 8, 8), torch.tensor([0, 0, 1, 1]))
        assert torch.equal(embed(toy_model, batch)[0], embed(toy_model, batch)[0])

    def test_empty_batch(self, toy_model):
        batch = LabeledBatch(torch.empty(0, 3, 8, 8), torch.empty(0, dtype=torch.long))
        with pytest.raises(ShapeMismatchError):
            embed(toy_model, batch)

    def test_non_finite_weights(self, toy_model):
        toy_model.eval()
        with torch.no_grad():
            toy_model.stem[0].weight.fill_(float("nan"))
        with pytest.raises(NonFiniteError):
            embed(toy_model, LabeledBatch(torch.randn(2, 3, 8, 8), torch.tensor([0, 1])))

    def test_embed_batches_restores_mode(self, toy_model, stream):
        toy_model.train()
        z, labels = embed_batches(toy_model, stream.task(1).iter_split("test", 4))
        assert toy_model.training
        assert z.shape == (6, 16)
        assert labels.tolist() == stream.task(1).test_split.labels.tolist()


class TestMining:
    """Test suite for batch-hard mining."""

    def test_four_points_two_classes(self):
        z = torch.tensor([[0.0, 0.0], [0.1, 0.0], [1.0, 0.0], [1.2, 0.0]])
        labels = torch.tensor([0, 0, 1, 1])
        triplets = mine_triplets(z, labels)
        assert triplets == [Triplet(0, 1, 2), Triplet(1, 0, 2), Triplet(2, 3, 1), Triplet(3, 2, 1)]

    def test_matches_exhaustive_search(self):
        generator = torch.Generator().manual_seed(0)
        for _ in range(ORACLE_CASES):
            z, labels = random_labeled_embeddings(generator)
            expected = _oracle_hardest(z, labels.tolist())
            mined = {t.anchor: (t.positive, t.negative) for t in mine_triplets(z, labels)}
            assert mined == expected

    def test_single_class_gives_nothing(self):
        assert mine_triplets(torch.randn(4, 3), torch.zeros(4, dtype=torch.long)) == []

    def test_two_points_two_classes_gives_nothing(self):
        assert mine_triplets(torch.randn(2, 3), torch.tensor([0, 1])) == []

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            mine_triplets(torch.randn(3, 2), torch.tensor([0, 1]))


class TestTripletLoss:
    """Test suite for the triplet loss."""

    def test_satisfied_margin_is_zero(self):
        # D(a,p)=0, D(a,n)=0.5
        z = torch.tensor([[0.0, 0.0], [0.0, 0.0], [0.5**0.5, 0.0]])
        loss, n = triplet_loss(z, [Triplet(0, 1, 2)], margin=0.2)
        assert n == 1
        assert loss.item() == pytest.approx(0.0)

    def test_equidistant_gives_margin(self):
        z = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        loss, _ = triplet_loss(z, [Triplet(0, 1, 2)], margin=0.2)
        assert loss.item() == pytest.approx(0.2)

    def test_matches_pairwise_oracle(self):
        generator = torch.Generator().manual_seed(1)
        for _ in range(ORACLE_CASES):
            z, labels = random_labeled_embeddings(generator)
            margin = 0.05 + float(torch.rand(1, generator=generator))
            triplets = mine_triplets(z, labels)
            rows = z.tolist()
            hinges = []
            for t in triplets:
                d_ap = _squared_distance(rows[t.anchor], rows[t.positive])
                d_an = _squared_distance(rows[t.anchor], rows[t.negative])
                hinges.append(max(0.0, d_ap - d_an + margin))
            expected = sum(hinges) / len(hinges) if hinges else 0.0
            loss, count = triplet_loss(z, triplets, margin)
            assert count == len(hinges)
            assert abs(loss.item() - expected) < 1e-5 * max(1.0, expected)

    def test_empty_triplets(self):
        z = torch.randn(4, 3, requires_grad=True)
        loss, n = triplet_loss(z, [])
        assert n == 0
        assert loss.item() == 0.0
        assert not loss.requires_grad

    def test_non_negative(self):
        generator = torch.Generator().manual_seed(2)
        for _ in range(ORACLE_CASES):
            z, labels = random_labeled_embeddings(generator)
            loss, _ = triplet_loss(z, mine_triplets(z, labels))
            assert loss.item() >= 0.0

    def test_margin_must_be_positive(self):
        with pytest.raises(ValueError):
            triplet_loss(torch.randn(3, 2), [Triplet(0, 1, 2)], margin=0.0)

    def test_gradient_matches_finite_differences(self):
        generator = torch.Generator().manual_seed(3)
        z = torch.randn(8, 8, generator=generator, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
        triplets = mine_triplets(z, labels)
        assert torch.autograd.gradcheck(lambda x: triplet_loss(x, triplets)[0], (z,))


class TestCentroids:
    """Test suite for running and frozen centroids."""

    def test_running_centroid_is_mean(self):
        running = RunningCentroids()
        running.update(torch.tensor([[1.0, 0.0], [3.0, 2.0]]), torch.tensor([4, 4]))
        running.update(torch.tensor([[2.0, 4.0]]), torch.tensor([4]))
        assert torch.allclose(running.get(4), torch.tensor([2.0, 2.0]))

    def test_centroid_pull_loss(self):
        running = RunningCentroids()
        z = torch.tensor([[1.0, 1.0], [-1.0, -1.0]], requires_grad=True)
        loss = centroid_pull_loss(z, torch.tensor([0, 0]), running)
        assert loss.item() == pytest.approx(2.0)
        loss.backward()
        assert torch.allclose(z.grad, torch.tensor([[1.0, 1.0], [-1.0, -1.0]]))

    def test_compute_centroids_matches_mean(self, toy_model, stream):
        task = stream.task(1)
        store = CentroidStore()
        centroids = compute_centroids(toy_model, task, store)
        z, labels = embed_batches(toy_model, task.iter_split("train", 5))
        for c in task.class_ids:
            expected = z[labels == c].double().mean(0).float()
            assert torch.allclose(centroids[c], expected, atol=1e-5)
            assert store.provenance[c] == 1
            assert store.counts[c] == 6

    def test_compute_centroids_order_invariant(self, toy_model, stream):
        task = stream.task(1)
        permuted = TaskSpec(
            1,
            task.class_ids,
            task.train_split.subset(torch.randperm(len(task.train_split))),
            task.test_split,
            task.channel_mean,
            task.channel_std,
        )
        a = compute_centroids(toy_model, task)
        b = compute_centroids(toy_model, permuted)
        for c in task.class_ids:
            assert torch.allclose(a[c], b[c], atol=1e-5)

    def test_compute_centroids_eval_mode(self, toy_model, stream):
        """Centroids are independent of the batch size because BN uses running stats."""
        task = stream.task(2)
        a = compute_centroids(toy_model.train(), task, batch_size=3)
        b = compute_centroids(toy_model, task, batch_size=12)
        for c in task.class_ids:
            assert torch.allclose(a[c], b[c], atol=1e-5)


class TestCentroidStore:
    """Test suite for the append-only store."""

    def _store(self):
        store = CentroidStore()
        store.add(3, torch.tensor([1.0, 2.0]), 10, 1)
        store.add(0, torch.tensor([-1.0, 0.5]), 12, 1)
        store.add(1, torch.tensor([0.0, 4.0]), 7, 2)
        return store

    def test_overwrite_rejected(self):
        store = self._store()
        with pytest.raises(CentroidStoreError, match="already frozen"):
            store.add(3, torch.zeros(2), 1, 2)

    def test_dimension_mismatch(self):
        store = self._store()
        with pytest.raises(CentroidStoreError):
            store.add(9, torch.zeros(3), 1, 2)

    def test_matrix_sorted_by_class(self):
        ids, matrix = self._store().matrix()
        assert ids == [0, 1, 3]
        assert torch.equal(matrix[2], torch.tensor([1.0, 2.0]))

    def test_save_load(self, tmp_path):
        store = self._store()
        path = tmp_path / "centroids.bin"
        store.save(path)
        assert path.read_bytes()[:4] == b"RKCS"
        assert path.stat().st_size == 16 + 3 * (8 + 4 + 8 + 4 * 2)

        loaded = CentroidStore.load(path)
        assert list(loaded.centroids) == [3, 0, 1]
        assert loaded.provenance == store.provenance
        assert loaded.counts == store.counts
        assert torch.equal(loaded.centroids[1], store.centroids[1])

    def test_earlier_store_is_prefix(self, tmp_path):
        store = CentroidStore()
        store.add(0, torch.ones(2), 1, 1)
        store.add(1, torch.zeros(2), 1, 1)
        store.save(tmp_path / "after1.bin")
        store.add(2, torch.full((2,), 2.0), 1, 2)
        store.save(tmp_path / "after2.bin")

        before = (tmp_path / "after1.bin").read_bytes()[16:]
        after = (tmp_path / "after2.bin").read_bytes()[16:]
        assert after.startswith(before)

    def test_load_rejects_bad_files(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(CentroidStoreError, match="not a centroid store"):
            CentroidStore.load(path)

        self._store().save(path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CentroidStoreError, match="truncated"):
            CentroidStore.load(path)

    def test_empty_store_matrix(self):
        with pytest.raises(CentroidStoreError):
            CentroidStore().matrix()


class TestNCM:
    """Test suite for nearest-class-mean classification."""

    def test_single_class(self):
        store = CentroidStore()
        store.add(7, torch.zeros(3), 1, 1)
        assert ncm_classify(torch.randn(5, 3), store).tolist() == [7] * 5

    def test_tie_goes_to_lowest_id(self):
        store = CentroidStore()
        store.add(5, torch.tensor([-1.0, 0.0]), 1, 1)
        store.add(2, torch.tensor([1.0, 0.0]), 1, 1)
        assert ncm_classify(torch.tensor([[0.0, 0.0]]), store).tolist() == [2]

    def test_matches_exhaustive_oracle_and_insertion_order(self):
        generator = torch.Generator().manual_seed(4)
        z = torch.randn(20, 6, generator=generator)
        centroids = {c: torch.randn(6, generator=generator) for c in (0, 3, 4, 9)}
        expected = [
            min(centroids, key=lambda c: (float(torch.dist(row, centroids[c])), c)) for row in z
        ]
        for order in itertools.permutations(centroids):
            store = CentroidStore()
            for c in order:
                store.add(c, centroids[c], 1, 1)
            assert ncm_classify(z, store).tolist() == expected

    def test_dimension_mismatch(self):
        store = CentroidStore()
        store.add(0, torch.zeros(3), 1, 1)
        with pytest.raises(ShapeMismatchError):
            ncm_classify(torch.zeros(2, 4), store)


class TestSeparability:
    """Test suite for the separability report."""

    def test_far_clusters(self):
        z = torch.tensor(
            [[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]], dtype=torch.float64
        )
        report = separability_report(z, torch.tensor([0, 0, 1, 1]))
        assert report.mean_intra == pytest.approx(0.1)
        assert report.ratio > 50

    def test_identical_points_are_infinite(self):
        report = separability_report(torch.zeros(4, 3), torch.tensor([0, 0, 1, 1]))
        assert report.ratio == float("inf")

    def test_random_labels_ratio_near_one(self):
        generator = torch.Generator().manual_seed(5)
        z = torch.randn(1000, 8, generator=generator)
        labels = torch.randint(0, 2, (1000,), generator=generator)
        assert separability_report(z, labels).ratio == pytest.approx(1.0, abs=0.1)

    def test_degenerate_classes(self):
        with pytest.raises(SeparabilityError):
            separability_report(torch.randn(3, 2), torch.zeros(3, dtype=torch.long))
        with pytest.raises(SeparabilityError):
            separability_report(torch.randn(3, 2), torch.tensor([0, 0, 1]))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
