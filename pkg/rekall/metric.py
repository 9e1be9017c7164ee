"""
Metric learning on top of the embedding backbone.

Covers embedding extraction, online batch-hard triplet mining, the triplet loss,
the centroid pull used for single-class batches, the append-only centroid store,
nearest-class-mean classification and the separability diagnostic.
"""

import logging
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import check_finite
from .exceptions import CentroidStoreError, SeparabilityError, ShapeMismatchError
from .models import SeparabilityReport
from .task_stream import LabeledBatch, TaskSpec

logger = logging.getLogger(__name__)

STORE_MAGIC = b"RKCS"
STORE_VERSION = 1


@dataclass(frozen=True)
class Triplet:
    """Batch-local (anchor, positive, negative) indices."""

    anchor: int
    positive: int
    negative: int


def _device_of(model: nn.Module) -> torch.device:
    return next(model.parameters()).device


def embed(model: nn.Module, batch: LabeledBatch) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """
    Run the backbone on a batch.

    Gradients follow the caller's autograd context and the model's current
    train/eval mode is left untouched.

    :param model: Embedding backbone
    :type model: EmbeddingBackbone
    :param batch: Normalized images
    :type batch: LabeledBatch

    :return: (Z of shape (batch, d), feature maps in network order)
    :rtype: Tuple[torch.Tensor, List[torch.Tensor]]

    :raises ShapeMismatchError: For an empty batch or wrong image shape
    :raises NonFiniteError: For non-finite embeddings
    """
    if len(batch) == 0:
        raise ShapeMismatchError("cannot embed an empty batch")
    z, feature_maps = model(batch.images.to(_device_of(model)))
    check_finite(z)
    return z, feature_maps


def pairwise_sq_distances(z: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distance matrix, computed by explicit differences."""
    diff = z.unsqueeze(1) - z.unsqueeze(0)
    return diff.pow(2).sum(-1)


def mine_triplets(z: torch.Tensor, labels: torch.Tensor) -> list[Triplet]:
    """
    Batch-hard mining.

    For every anchor with at least one positive and one negative, take the
    farthest same-class sample and the nearest different-class sample. Ties go to
    the lowest batch index.

    :param z: Embeddings (batch, d)
    :type z: torch.Tensor
    :param labels: Class ids (batch,)
    :type labels: torch.Tensor

    :return: One triplet per valid anchor, empty when no anchor is valid
    :rtype: List[Triplet]
    """
    if z.shape[0] != labels.shape[0]:
        raise ShapeMismatchError("embeddings and labels differ in length")
    with torch.no_grad():
        dist = pairwise_sq_distances(z.detach())
        labels = labels.to(dist.device)
        same = labels.unsqueeze(0) == labels.unsqueeze(1)
        eye = torch.eye(len(labels), dtype=torch.bool, device=dist.device)
        pos_mask = same & ~eye
        neg_mask = ~same

        valid = pos_mask.any(1) & neg_mask.any(1)
        if not valid.any():
            return []

        pos_dist = dist.masked_fill(~pos_mask, float("-inf"))
        neg_dist = dist.masked_fill(~neg_mask, float("inf"))
        hardest_pos = pos_dist.argmax(1)
        hardest_neg = neg_dist.argmin(1)

    anchors = torch.nonzero(valid, as_tuple=True)[0].tolist()
    return [
        Triplet(a, int(hardest_pos[a]), int(hardest_neg[a])) for a in anchors
    ]


def triplet_loss(
    z: torch.Tensor, triplets: list[Triplet], margin: float = 0.2
) -> tuple[torch.Tensor, int]:
    """
    Mean hinge max(0, D(a,p) - D(a,n) + m) with squared Euclidean D.

    :param z: Embeddings (batch, d)
    :type z: torch.Tensor
    :param triplets: Mined triplets
    :type triplets: List[Triplet]
    :param margin: Margin m > 0
    :type margin: float

    :return: (loss, number of triplets); an empty list gives a zero loss that
        contributes no gradient
    :rtype: Tuple[torch.Tensor, int]
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    if not triplets:
        return z.new_zeros(()), 0
    a = torch.tensor([t.anchor for t in triplets], device=z.device)
    p = torch.tensor([t.positive for t in triplets], device=z.device)
    n = torch.tensor([t.negative for t in triplets], device=z.device)
    d_ap = (z[a] - z[p]).pow(2).sum(-1)
    d_an = (z[a] - z[n]).pow(2).sum(-1)
    return torch.relu(d_ap - d_an + margin).mean(), len(triplets)


class RunningCentroids:
    """Cumulative per-class embedding means of the current task (detached)."""

    def __init__(self) -> None:
        self._sums: dict[int, torch.Tensor] = {}
        self._counts: dict[int, int] = {}

    def update(self, z: torch.Tensor, labels: torch.Tensor) -> None:
        z = z.detach()
        for c in torch.unique(labels).tolist():
            rows = z[labels.to(z.device) == c]
            total = rows.sum(0)
            self._sums[c] = self._sums[c].to(total.device) + total if c in self._sums else total
            self._counts[c] = self._counts.get(c, 0) + rows.shape[0]

    def get(self, class_id: int) -> torch.Tensor:
        return self._sums[class_id] / self._counts[class_id]

    def reset(self) -> None:
        self._sums.clear()
        self._counts.clear()

    def state_dict(self) -> dict:
        return {"sums": dict(self._sums), "counts": dict(self._counts)}

    def load_state_dict(self, state: dict) -> None:
        self._sums = {int(k): v for k, v in state["sums"].items()}
        self._counts = {int(k): int(v) for k, v in state["counts"].items()}


def centroid_pull_loss(
    z: torch.Tensor, labels: torch.Tensor, running: RunningCentroids
) -> torch.Tensor:
    """
    Mean squared distance of each embedding to its class's running centroid.

    Used instead of the triplet loss when a batch holds a single class. The
    running centroids are updated with the batch before the loss is taken and
    carry no gradient.

    :param z: Embeddings (batch, d)
    :type z: torch.Tensor
    :param labels: Class ids (batch,)
    :type labels: torch.Tensor
    :param running: Running centroids of the current task
    :type running: RunningCentroids

    :return: Scalar loss >= 0
    :rtype: torch.Tensor
    """
    running.update(z, labels)
    targets = torch.stack([running.get(int(c)) for c in labels.tolist()])
    return (z - targets).pow(2).sum(-1).mean()


class CentroidStore:
    """
    Append-only map class id -> centroid, with sample counts and provenance.

    The on-disk layout (``centroids.bin``) is a 16-byte header (magic ``RKCS``,
    uint32 version, uint32 d, uint32 count, little endian) followed by
    ``count`` records of (int64 class_id, int32 task_index, int64 n_v,
    float32[d] centroid), ordered by insertion.
    """

    def __init__(self) -> None:
        self.centroids: dict[int, torch.Tensor] = {}
        self.counts: dict[int, int] = {}
        self.provenance: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.centroids)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.centroids

    @property
    def classes(self) -> list[int]:
        """Stored class ids, sorted."""
        return sorted(self.centroids)

    def add(self, class_id: int, centroid: torch.Tensor, count: int, task_index: int) -> None:
        """
        Freeze the centroid of a class.

        :raises CentroidStoreError: If the class already has a centroid
        """
        if class_id in self.centroids:
            raise CentroidStoreError(
                f"class {class_id} already frozen at task {self.provenance[class_id]}"
            )
        if self.centroids:
            dim = next(iter(self.centroids.values())).shape[0]
            if centroid.shape != (dim,):
                raise CentroidStoreError(f"centroid must have shape ({dim},)")
        self.centroids[class_id] = centroid.detach().to(torch.float32).cpu().clone()
        self.counts[class_id] = int(count)
        self.provenance[class_id] = int(task_index)

    def matrix(self) -> tuple[list[int], torch.Tensor]:
        """
        Centroids stacked by ascending class id.

        :raises CentroidStoreError: For an empty store
        """
        if not self.centroids:
            raise CentroidStoreError("centroid store is empty")
        ids = self.classes
        return ids, torch.stack([self.centroids[c] for c in ids])

    def _dtype(self, dim: int) -> np.dtype:
        return np.dtype(
            [
                ("class_id", "<i8"),
                ("task_index", "<i4"),
                ("count", "<i8"),
                ("centroid", "<f4", (dim,)),
            ]
        )

    def save(self, path: Path) -> None:
        """
        Write the store in insertion order (see class docstring for the layout).

        :param path: Destination, usually ``<run>/centroids.bin``
        :type path: Path
        """
        dim = next(iter(self.centroids.values())).shape[0] if self.centroids else 0
        records = np.zeros(len(self.centroids), dtype=self._dtype(dim))
        for i, c in enumerate(self.centroids):
            records[i] = (c, self.provenance[c], self.counts[c], self.centroids[c].numpy())
        header = np.array([STORE_VERSION, dim, len(records)], dtype="<u4")
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as f:
            f.write(STORE_MAGIC)
            f.write(header.tobytes())
            f.write(records.tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: Path) -> "CentroidStore":
        """
        Read a store written by :meth:`save`.

        :raises CentroidStoreError: On a bad magic, version or truncated file
        """
        raw = Path(path).read_bytes()
        if raw[:4] != STORE_MAGIC:
            raise CentroidStoreError(f"{path} is not a centroid store")
        version, dim, count = np.frombuffer(raw[4:16], dtype="<u4")
        if version != STORE_VERSION:
            raise CentroidStoreError(f"unsupported centroid store version {version}")
        store = cls()
        dtype = store._dtype(int(dim))
        if len(raw) - 16 != dtype.itemsize * int(count):
            raise CentroidStoreError(f"{path} is truncated")
        for rec in np.frombuffer(raw[16:], dtype=dtype, count=int(count)):
            store.add(
                int(rec["class_id"]),
                torch.from_numpy(rec["centroid"].copy()),
                int(rec["count"]),
                int(rec["task_index"]),
            )
        return store

    def state_dict(self) -> dict:
        return {
            "order": list(self.centroids),
            "centroids": {c: v.clone() for c, v in self.centroids.items()},
            "counts": dict(self.counts),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "CentroidStore":
        store = cls()
        for c in state["order"]:
            store.add(c, state["centroids"][c], state["counts"][c], state["provenance"][c])
        return store


@torch.no_grad()
def embed_batches(
    model: nn.Module, batches: Iterable[LabeledBatch]
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Embed a sequence of batches in evaluation mode.

    The model's previous train/eval mode is restored afterwards.

    :return: (Z on cpu, labels)
    :rtype: Tuple[torch.Tensor, torch.Tensor]
    """
    was_training = model.training
    model.eval()
    try:
        zs, ys = [], []
        for batch in batches:
            z, _ = embed(model, batch)
            zs.append(z.cpu())
            ys.append(batch.labels.cpu())
    finally:
        model.train(was_training)
    if not zs:
        raise ShapeMismatchError("no batches to embed")
    return torch.cat(zs), torch.cat(ys)


def compute_centroids(
    model: nn.Module,
    task: TaskSpec,
    store: CentroidStore | None = None,
    batch_size: int = 256,
) -> dict[int, torch.Tensor]:
    """
    Mean training embedding per class of ``task``, with the model in eval mode.

    :param model: Backbone that just finished training on ``task``
    :type model: EmbeddingBackbone
    :param task: Task whose classes are frozen
    :type task: TaskSpec
    :param store: Store receiving the centroids with provenance ``task.task_index``
    :type store: Optional[CentroidStore]
    :param batch_size: Embedding batch size
    :type batch_size: int

    :return: class id -> centroid
    :rtype: Dict[int, torch.Tensor]

    :raises CentroidStoreError: If a class of the task has no training sample
    """
    z, labels = embed_batches(model, task.iter_split("train", batch_size))
    z = z.to(torch.float64)
    centroids: dict[int, torch.Tensor] = {}
    for c in task.class_ids:
        rows = z[labels == c]
        if rows.shape[0] == 0:
            raise CentroidStoreError(f"class {c} of task {task.task_index} has no samples")
        centroids[c] = rows.mean(0).to(torch.float32)
        if store is not None:
            store.add(c, centroids[c], rows.shape[0], task.task_index)
    logger.debug(f"Froze centroids for classes {list(task.class_ids)}")
    return centroids


def ncm_classify(z: torch.Tensor, store: CentroidStore) -> torch.Tensor:
    """
    Nearest class mean under Euclidean distance over every stored class.

    Ties go to the lowest class id.

    :param z: Embeddings (batch, d)
    :type z: torch.Tensor
    :param store: Centroid store
    :type store: CentroidStore

    :return: Predicted class ids (batch,)
    :rtype: torch.Tensor

    :raises CentroidStoreError: For an empty store
    """
    ids, centroids = store.matrix()
    centroids = centroids.to(device=z.device, dtype=z.dtype)
    if z.shape[1] != centroids.shape[1]:
        raise ShapeMismatchError(
            f"embedding dim {z.shape[1]} does not match centroid dim {centroids.shape[1]}"
        )
    dist = torch.linalg.vector_norm(z.unsqueeze(1) - centroids.unsqueeze(0), dim=-1)
    return torch.tensor(ids, device=z.device)[dist.argmin(1)]


def separability_report(z: torch.Tensor, labels: torch.Tensor) -> SeparabilityReport:
    """
    Mean within-class and across-class pairwise Euclidean distances.

    :param z: Embeddings (n, d)
    :type z: torch.Tensor
    :param labels: Class ids (n,)
    :type labels: torch.Tensor

    :return: Report with ratio = inter / intra, ``inf`` when intra is zero
    :rtype: SeparabilityReport

    :raises SeparabilityError: For fewer than two classes or a class with one sample
    """
    classes, counts = torch.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise SeparabilityError("separability needs at least two classes")
    if (counts < 2).any():
        raise SeparabilityError("every class needs at least two samples")

    z = z.detach().to(torch.float64)
    dist = torch.cdist(z, z, compute_mode="donot_use_mm_for_euclid_dist")
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    upper = torch.ones(len(labels), len(labels), dtype=torch.bool).triu(1)
    intra = dist[same & upper].mean().item()
    inter = dist[~same & upper].mean().item()
    ratio = inter / intra if intra > 0 else float("inf")
    return SeparabilityReport(mean_intra=intra, mean_inter=inter, ratio=ratio)
