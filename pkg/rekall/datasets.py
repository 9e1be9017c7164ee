"""
Dataset adapters.

Every adapter turns a concrete source (torchvision CIFAR-10, MedMNIST-style
``.npz`` archives, a procedural fixture, a local image folder) into a
:class:`DatasetHandle`: uint8 image tensors of shape (N, C, H, W) with global class
labels and per-sample identities, split into train and test.
"""

import logging
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import requests
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .config import Config
from .exceptions import DatasetError
from .models import ImageFolderSpec, SyntheticBlobsSpec
from .retry import retry

if TYPE_CHECKING:
    from .audit import AccessAuditor

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = frozenset({".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif"})

CIFAR10_CLASSES = {
    0: "airplane",
    1: "automobile",
    2: "bird",
    3: "cat",
    4: "deer",
    5: "dog",
    6: "frog",
    7: "horse",
    8: "ship",
    9: "truck",
}

OCT_CLASSES = {0: "CNV", 1: "DME", 2: "Drusen", 3: "Normal"}

PATHMNIST_CLASSES = {
    0: "adipose",
    1: "background",
    2: "debris",
    3: "lymphocytes",
    4: "mucus",
    5: "smooth muscle",
    6: "normal colon mucosa",
    7: "cancer-associated stroma",
    8: "colorectal adenocarcinoma epithelium",
}


class ImageCollection:
    """
    A labeled image collection backed by in-memory uint8 tensors.

    Reads go through :meth:`read` so an attached
    :class:`~rekall.audit.AccessAuditor` sees every sample that leaves the
    collection. Collections are read-only after construction.

    :ivar split: ``train`` or ``test``
    :vartype split: str
    :ivar task_index: Owning task, None for a whole-dataset collection
    :vartype task_index: Optional[int]
    :ivar auditor: Access auditor notified on every read
    :vartype auditor: Optional[AccessAuditor]
    """

    def __init__(
        self,
        images: torch.Tensor,
        labels: torch.Tensor,
        sample_ids: torch.Tensor,
        split: str,
        task_index: int | None = None,
    ):
        """
        Initialize the collection.

        :param images: uint8 tensor (N, C, H, W)
        :type images: torch.Tensor
        :param labels: int64 tensor (N,) of global class ids
        :type labels: torch.Tensor
        :param sample_ids: int64 tensor (N,) of dataset-wide sample identities
        :type sample_ids: torch.Tensor
        :param split: ``train`` or ``test``
        :type split: str
        :param task_index: Owning task index
        :type task_index: Optional[int]

        :raises DatasetError: On inconsistent shapes or dtypes
        """
        if images.dtype != torch.uint8 or images.dim() != 4:
            raise DatasetError("images must be a uint8 tensor of shape (N, C, H, W)")
        if labels.shape != (images.shape[0],) or sample_ids.shape != labels.shape:
            raise DatasetError("labels and sample_ids must have one entry per image")
        if split not in ("train", "test"):
            raise DatasetError(f"unknown split {split!r}")
        self.images = images
        self.labels = labels.long()
        self.sample_ids = sample_ids.long()
        self.split = split
        self.task_index = task_index
        self.auditor: AccessAuditor | None = None

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        """(channels, height, width)."""
        _, c, h, w = self.images.shape
        return (int(c), int(h), int(w))

    def class_indices(self) -> dict[int, torch.Tensor]:
        """Positions of every class, in collection order."""
        return {
            int(c): torch.nonzero(self.labels == c, as_tuple=True)[0]
            for c in torch.unique(self.labels).tolist()
        }

    def read(self, indices: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Fetch images and labels at ``indices``.

        :param indices: int64 positions
        :type indices: torch.Tensor

        :return: (uint8 images, labels)
        :rtype: Tuple[torch.Tensor, torch.Tensor]
        """
        if self.auditor is not None:
            self.auditor.record(self, int(indices.numel()))
        return self.images[indices], self.labels[indices]

    def subset(
        self, indices: torch.Tensor, task_index: int | None = None
    ) -> "ImageCollection":
        """
        A new collection holding ``indices`` of this one (not audited).

        :param indices: int64 positions
        :type indices: torch.Tensor
        :param task_index: Owning task of the subset
        :type task_index: Optional[int]

        :return: Subset collection
        :rtype: ImageCollection
        """
        return ImageCollection(
            self.images[indices],
            self.labels[indices],
            self.sample_ids[indices],
            split=self.split,
            task_index=task_index,
        )

    @classmethod
    def concat(
        cls, parts: list["ImageCollection"], task_index: int | None = None
    ) -> "ImageCollection":
        """Concatenate collections of the same split."""
        if not parts:
            raise DatasetError("nothing to concatenate")
        if len({p.split for p in parts}) != 1:
            raise DatasetError("cannot concatenate different splits")
        return cls(
            torch.cat([p.images for p in parts]),
            torch.cat([p.labels for p in parts]),
            torch.cat([p.sample_ids for p in parts]),
            split=parts[0].split,
            task_index=task_index,
        )


@dataclass
class DatasetHandle:
    """
    A loaded dataset, before partitioning into tasks.

    :ivar skipped: Files that could not be read (image folders only)
    :vartype skipped: int
    """

    name: str
    train: ImageCollection
    test: ImageCollection
    class_names: dict[int, str]
    skipped: int = 0
    source: str = field(default="", repr=False)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        """(channels, height, width)."""
        return self.train.image_shape

    def __len__(self) -> int:
        return len(self.train) + len(self.test)


def _collection(images: np.ndarray, labels: np.ndarray, split: str, offset: int) -> ImageCollection:
    """Wrap NHWC / NHW uint8 arrays as an NCHW collection."""
    if images.ndim == 3:
        images = images[..., None]
    tensor = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).contiguous()
    labels_t = torch.from_numpy(np.asarray(labels).reshape(-1).astype(np.int64))
    ids = torch.arange(offset, offset + len(labels_t), dtype=torch.int64)
    return ImageCollection(tensor, labels_t, ids, split=split)


def _resize(collection: ImageCollection, size: int) -> ImageCollection:
    """Bilinear resize to ``size`` x ``size`` (kept as uint8)."""
    if collection.images.shape[-1] == size and collection.images.shape[-2] == size:
        return collection
    resized = F.interpolate(
        collection.images.float(), size=(size, size), mode="bilinear", align_corners=False
    )
    images = resized.round().clamp(0, 255).to(torch.uint8)
    return ImageCollection(
        images, collection.labels, collection.sample_ids, split=collection.split
    )


class DatasetAdapter(ABC):
    """
    Abstract base class for dataset sources.
    """

    name: str = ""

    @abstractmethod
    def load(self) -> DatasetHandle:
        """
        Load the dataset into memory.

        :return: Loaded dataset
        :rtype: DatasetHandle

        :raises DatasetError: If the source is missing or malformed
        """


class Cifar10Adapter(DatasetAdapter):
    """CIFAR-10 through torchvision (downloaded into ``data_root/cifar10``)."""

    name = "cifar10"

    def __init__(self, data_root: Path, download: bool = True):
        self.root = data_root / "cifar10"
        self.download = download

    def load(self) -> DatasetHandle:
        """
        Load both CIFAR-10 splits at native 32x32.

        :return: Loaded dataset
        :rtype: DatasetHandle
        """
        from torchvision import datasets

        try:
            train = datasets.CIFAR10(str(self.root), train=True, download=self.download)
            test = datasets.CIFAR10(str(self.root), train=False, download=self.download)
        except RuntimeError as e:
            raise DatasetError(f"CIFAR-10 not available under {self.root}: {e}") from e

        logger.info(f"Loaded CIFAR-10: {len(train.targets)} train, {len(test.targets)} test")
        return DatasetHandle(
            name=self.name,
            train=_collection(train.data, np.array(train.targets), "train", 0),
            test=_collection(test.data, np.array(test.targets), "test", len(train.targets)),
            class_names=dict(CIFAR10_CLASSES),
            source=str(self.root),
        )


class MedMnistAdapter(DatasetAdapter):
    """
    MedMNIST-style ``.npz`` archives (``train_images``, ``train_labels``,
    ``test_images``, ``test_labels``), resized to the target size.

    Archives are looked up in ``data_root`` first, then in the download cache;
    missing archives are downloaded into the cache.
    """

    ARCHIVES = {"oct": ("octmnist", OCT_CLASSES), "pathmnist": ("pathmnist", PATHMNIST_CLASSES)}

    def __init__(
        self,
        name: str,
        data_root: Path,
        cache_dir: Path,
        image_size: int = 32,
        download: bool = True,
    ):
        if name not in self.ARCHIVES:
            raise DatasetError(f"unknown MedMNIST dataset {name!r}")
        self.name = name
        self.archive, self.class_names = self.ARCHIVES[name]
        self.data_root = data_root
        self.cache_dir = cache_dir
        self.image_size = image_size
        self.download = download

    def archive_path(self) -> Path:
        """
        Locate the archive, downloading it when allowed.

        :return: Path to the ``.npz`` file
        :rtype: Path

        :raises DatasetError: If the archive is missing and cannot be downloaded
        """
        for candidate in (
            self.data_root / f"{self.archive}.npz",
            self.cache_dir / f"{self.archive}.npz",
        ):
            if candidate.exists():
                return candidate

        if not self.download:
            raise DatasetError(f"{self.archive}.npz not found in {self.data_root}")

        url = Config.MEDMNIST_URL.format(name=self.archive)
        destination = self.cache_dir / f"{self.archive}.npz"
        try:
            return download_archive(url, destination)
        except requests.RequestException as e:
            raise DatasetError(f"could not download {url}: {e}") from e

    def load(self) -> DatasetHandle:
        """
        Load and resize both splits.

        :return: Loaded dataset
        :rtype: DatasetHandle
        """
        path = self.archive_path()
        try:
            with np.load(path) as archive:
                train_x, train_y = archive["train_images"], archive["train_labels"]
                test_x, test_y = archive["test_images"], archive["test_labels"]
        except (OSError, KeyError, ValueError) as e:
            raise DatasetError(f"malformed archive {path}: {e}") from e

        train = _resize(_collection(train_x, train_y, "train", 0), self.image_size)
        test = _resize(_collection(test_x, test_y, "test", len(train)), self.image_size)
        logger.info(
            f"Loaded {self.archive}: {len(train)} train, {len(test)} test, "
            f"resized to {self.image_size}x{self.image_size}"
        )
        return DatasetHandle(
            name=self.name,
            train=train,
            test=test,
            class_names=dict(self.class_names),
            source=str(path),
        )


class SyntheticBlobsAdapter(DatasetAdapter):
    """
    Procedural fixture: each class is a prototype made of Gaussian blobs, samples
    are jittered, rescaled and noisy copies of their prototype.
    """

    name = "synthetic-blobs"

    def __init__(self, spec: SyntheticBlobsSpec | None = None):
        self.spec = spec or SyntheticBlobsSpec()

    def _prototypes(self, rng: np.random.Generator) -> np.ndarray:
        s, c = self.spec.image_size, self.spec.channels
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        prototypes = np.zeros((self.spec.num_classes, s, s, c))
        for k in range(self.spec.num_classes):
            for _ in range(self.spec.blobs_per_class):
                cy, cx = rng.uniform(0.15 * s, 0.85 * s, size=2)
                sigma = rng.uniform(s / 10, s / 5)
                blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
                colour = rng.uniform(0.3, 1.0, size=c)
                prototypes[k] += blob[..., None] * colour
        return np.clip(prototypes, 0.0, 1.0)

    def _samples(
        self, prototypes: np.ndarray, per_class: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        images, labels = [], []
        for k, proto in enumerate(prototypes):
            for _ in range(per_class):
                shift = rng.integers(-2, 3, size=2)
                img = np.roll(proto, shift=tuple(shift), axis=(0, 1))
                img = img * rng.uniform(0.8, 1.2)
                img = img + rng.normal(0.0, self.spec.noise, size=img.shape)
                images.append(np.clip(img, 0.0, 1.0))
                labels.append(k)
        stacked = (np.stack(images) * 255.0).round().astype(np.uint8)
        return stacked, np.array(labels, dtype=np.int64)

    def load(self) -> DatasetHandle:
        """
        Generate train and test splits deterministically.

        :return: Generated dataset
        :rtype: DatasetHandle
        """
        rng = np.random.default_rng(self.spec.fixture_seed)
        prototypes = self._prototypes(rng)
        train_x, train_y = self._samples(prototypes, self.spec.train_per_class, rng)
        test_x, test_y = self._samples(prototypes, self.spec.test_per_class, rng)
        return DatasetHandle(
            name=self.name,
            train=_collection(train_x, train_y, "train", 0),
            test=_collection(test_x, test_y, "test", len(train_y)),
            class_names={k: f"blob-{k}" for k in range(self.spec.num_classes)},
            source="procedural",
        )


class ImageFolderAdapter(DatasetAdapter):
    """
    A local folder with one sub-directory per class (PI-CAI style exports).

    Class ids follow the order of ``class_dirs``. There is no predefined test
    split: a seeded ``test_fraction`` of every class is held out. The handle is
    named after ``spec.name`` when set, so reports of a PI-CAI export read
    ``picai``.
    """

    name = "image-folder"

    def __init__(self, spec: ImageFolderSpec, test_fraction: float = 0.2, seed: int = 0):
        self.spec = spec
        self.test_fraction = test_fraction
        self.seed = seed

    def _read_image(self, path: Path) -> np.ndarray:
        mode = "RGB" if self.spec.channels == 3 else "L"
        size = self.spec.image_size
        with Image.open(path) as img:
            img = img.convert(mode).resize((size, size), Image.Resampling.BILINEAR)
            return np.asarray(img, dtype=np.uint8)

    def load(self) -> DatasetHandle:
        """
        Read every image, skipping unreadable files with a warning.

        :return: Loaded dataset with ``skipped`` set to the number of bad files
        :rtype: DatasetHandle

        :raises DatasetError: For a missing root, a missing class directory or a
            class directory without readable images
        """
        root = Path(self.spec.root)
        if not root.is_dir():
            raise DatasetError(f"image folder root {root} does not exist")

        images: list[np.ndarray] = []
        labels: list[int] = []
        skipped = 0
        for class_id, class_dir in enumerate(self.spec.class_dirs):
            directory = root / class_dir
            if not directory.is_dir():
                raise DatasetError(f"class directory {directory} does not exist")
            files = sorted(
                p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
            )
            read = 0
            for path in files:
                try:
                    images.append(self._read_image(path))
                except (OSError, UnidentifiedImageError, ValueError) as e:
                    logger.warning(f"Skipping unreadable image {path}: {e}")
                    skipped += 1
                    continue
                labels.append(class_id)
                read += 1
            if read == 0:
                raise DatasetError(f"class directory {directory} has no readable images")

        everything = _collection(np.stack(images), np.array(labels), "train", 0)

        generator = torch.Generator().manual_seed(self.seed)
        train_idx, test_idx = [], []
        for indices in everything.class_indices().values():
            order = indices[torch.randperm(len(indices), generator=generator)]
            n_test = 0
            if len(order) > 1:
                n_test = min(max(round(self.test_fraction * len(order)), 1), len(order) - 1)
            test_idx.append(order[:n_test])
            train_idx.append(order[n_test:])

        train = everything.subset(torch.sort(torch.cat(train_idx)).values)
        held_out = everything.subset(torch.sort(torch.cat(test_idx)).values)
        test = ImageCollection(
            held_out.images, held_out.labels, held_out.sample_ids, split="test"
        )

        if skipped:
            logger.warning(f"Skipped {skipped} unreadable files under {root}")
        logger.info(f"Loaded image folder {root}: {len(train)} train, {len(test)} test")
        return DatasetHandle(
            name=self.spec.name or self.name,
            train=train,
            test=test,
            class_names=dict(enumerate(self.spec.class_dirs)),
            skipped=skipped,
            source=str(root),
        )


def download_archive(url: str, destination: Path) -> Path:
    """
    Download ``url`` to ``destination`` through a temporary file.

    :param url: Archive URL
    :type url: str
    :param destination: Final path
    :type destination: Path

    :return: ``destination``
    :rtype: Path

    :raises requests.RequestException: When every attempt fails
    """

    @retry(
        num_retries=Config.DOWNLOAD_RETRIES,
        sleep_between=2,
        exceptions=(requests.RequestException,),
    )
    def _fetch() -> Path:
        logger.info(f"Downloading {url}")
        response = requests.get(url, stream=True, timeout=Config.DOWNLOAD_TIMEOUT)
        response.raise_for_status()
        destination.parent.mkdir(parents=True, exist_ok=True)
        partial = destination.with_suffix(destination.suffix + ".part")
        with open(partial, "wb") as f:
            for chunk in response.iter_content(chunk_size=1 << 20):
                f.write(chunk)
        os.replace(partial, destination)
        logger.info(f"Saved {destination} ({destination.stat().st_size} bytes)")
        return destination

    return _fetch()


def image_folder_adapter(
    root: Path | str,
    class_dirs: list[str],
    channels: int = 3,
    image_size: int = 32,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> DatasetHandle:
    """
    Load a local image folder as a dataset usable by ``build_task_stream``.

    :param root: Folder holding the class directories
    :type root: Union[Path, str]
    :param class_dirs: Class directory names; list position is the class id
    :type class_dirs: List[str]
    :param channels: 1 (grayscale) or 3 (RGB)
    :type channels: int
    :param image_size: Square resize target
    :type image_size: int
    :param test_fraction: Held-out fraction per class
    :type test_fraction: float
    :param seed: Seed of the holdout selection
    :type seed: int

    :return: Loaded dataset
    :rtype: DatasetHandle
    """
    spec = ImageFolderSpec(
        root=Path(root), class_dirs=class_dirs, channels=channels, image_size=image_size
    )
    return ImageFolderAdapter(spec, test_fraction=test_fraction, seed=seed).load()


class DatasetRegistry:
    """
    Dataset adapter factory keyed by dataset identifier.
    """

    @staticmethod
    def get_adapter(
        dataset_name: str,
        data_root: Path | None = None,
        synthetic: SyntheticBlobsSpec | None = None,
        image_folder: ImageFolderSpec | None = None,
        test_fraction: float = 0.2,
        seed: int = 0,
    ) -> DatasetAdapter:
        """
        Get the adapter for a dataset identifier.

        :param dataset_name: One of cifar10, oct, pathmnist, synthetic-blobs, image-folder
        :type dataset_name: str
        :param data_root: Dataset root, defaults to ``REKALL_DATA_ROOT``
        :type data_root: Optional[Path]
        :param synthetic: Fixture shape for synthetic-blobs
        :type synthetic: Optional[SyntheticBlobsSpec]
        :param image_folder: Folder layout for image-folder
        :type image_folder: Optional[ImageFolderSpec]
        :param test_fraction: Holdout fraction for image-folder
        :type test_fraction: float
        :param seed: Holdout seed for image-folder
        :type seed: int

        :return: Adapter instance
        :rtype: DatasetAdapter

        :raises DatasetError: For unknown identifiers or missing folder layout
        """
        root = Config.resolve_data_root(data_root)
        name = dataset_name.lower()
        if name == "cifar10":
            return Cifar10Adapter(root)
        if name in MedMnistAdapter.ARCHIVES:
            return MedMnistAdapter(name, root, Config.CACHE_DIR)
        if name == "synthetic-blobs":
            return SyntheticBlobsAdapter(synthetic)
        if name == "image-folder":
            if image_folder is None:
                raise DatasetError("image-folder needs a root and class directories")
            return ImageFolderAdapter(image_folder, test_fraction=test_fraction, seed=seed)
        raise DatasetError(f"unknown dataset {dataset_name!r}")
