"""
Pydantic models for rekall.

This module contains the configuration and report models used throughout the
package, providing typing and validation for everything that is read from or
written to disk as structured text. Tensor-carrying runtime types live next to
the code that uses them.
"""

import math
from enum import Enum
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

BUILTIN_DATASETS = ("cifar10", "oct", "pathmnist", "synthetic-blobs", "image-folder")


class TrainingMode(str, Enum):
    """
    Training regimes compared by the evaluation suite.

    :cvar FULL: Triplet loss plus both distillation terms and the embedding distance
    :cvar FAM_ONLY: Distillation restricted to feature attention matching
    :cvar COV_ONLY: Distillation restricted to the covariance penalty
    :cvar FINETUNE: Sequential training with the triplet loss only (lower bound)
    :cvar JOINT: Pooled training on every task seen so far (upper bound)
    """

    FULL = "full"
    FAM_ONLY = "fam_only"
    COV_ONLY = "cov_only"
    FINETUNE = "finetune"
    JOINT = "joint"

    @property
    def uses_replay(self) -> bool:
        """Whether this mode trains a generator against a teacher."""
        return self in (TrainingMode.FULL, TrainingMode.FAM_ONLY, TrainingMode.COV_ONLY)


class GeneratorPolicy(str, Enum):
    """
    When the replay generator is (re)initialized.

    :cvar PER_TASK: Fresh generator at the start of every task k >= 2
    :cvar PERSIST: One generator created at task 2 and kept for the rest of the run
    """

    PER_TASK = "per_task"
    PERSIST = "persist"


class AttentionVariant(str, Enum):
    """
    Representation compared by the feature attention matching loss.

    :cvar RAW: Flattened feature maps, normalized per sample
    :cvar CHANNEL_ENERGY: Channel-averaged squared activations (spatial attention maps)
    """

    RAW = "raw"
    CHANNEL_ENERGY = "channel_energy"


class SplitProtocol(BaseModel):
    """
    How a dataset's classes are partitioned into tasks.

    :ivar kind: ``builtin`` for the built-in split of a dataset, ``custom`` for an explicit partition
    :vartype kind: str
    :ivar partition: Ordered list of class-id lists, one per task (custom only)
    :vartype partition: Optional[List[List[int]]]
    :ivar randomize_class_order: Permute the class universe by seed, keeping task sizes
    :vartype randomize_class_order: bool
    :ivar max_train_per_class: Cap on training samples per class (desk-scale proxies)
    :vartype max_train_per_class: Optional[int]
    :ivar max_test_per_class: Cap on test samples per class
    :vartype max_test_per_class: Optional[int]
    :ivar test_fraction: Held-out fraction for datasets without a test split
    :vartype test_fraction: float
    """

    kind: Literal["builtin", "custom"] = Field("builtin", description="Split kind")
    partition: list[list[int]] | None = Field(None, description="Explicit partition")
    randomize_class_order: bool = Field(False, description="Seeded class permutation")
    max_train_per_class: int | None = Field(None, ge=1, description="Train cap per class")
    max_test_per_class: int | None = Field(None, ge=1, description="Test cap per class")
    test_fraction: float = Field(0.2, gt=0.0, lt=1.0, description="Holdout fraction")

    @model_validator(mode="after")
    def check_partition(self):
        """
        Require a partition for custom splits.

        :return: Validated protocol
        :rtype: SplitProtocol
        """
        if self.kind == "custom" and not self.partition:
            raise ValueError("custom split protocol requires a partition")
        if self.partition is not None and any(len(t) == 0 for t in self.partition):
            raise ValueError("every task in a partition needs at least one class")
        return self


class ImageFolderSpec(BaseModel):
    """Location and layout of a local image-folder dataset."""

    root: Path = Field(..., description="Directory holding one sub-directory per class")
    class_dirs: list[str] = Field(..., min_length=1, description="Class directory names")
    channels: Literal[1, 3] = Field(3, description="Image channels after loading")
    image_size: int = Field(32, ge=8, description="Square resize target")
    name: str | None = Field(
        None, description="Dataset name used in reports, e.g. picai (default image-folder)"
    )


class SyntheticBlobsSpec(BaseModel):
    """Shape of the procedural blob-image fixture."""

    num_classes: int = Field(4, ge=2, description="Number of classes")
    train_per_class: int = Field(100, ge=2, description="Training images per class")
    test_per_class: int = Field(50, ge=1, description="Test images per class")
    image_size: int = Field(32, ge=8, description="Square image size (multiple of 4)")
    channels: Literal[1, 3] = Field(3, description="Image channels")
    blobs_per_class: int = Field(3, ge=1, description="Gaussian blobs per class prototype")
    noise: float = Field(0.08, ge=0.0, description="Per-pixel noise std")
    fixture_seed: int = Field(0, ge=0, description="Seed of the generated content")

    @field_validator("image_size")
    @classmethod
    def check_image_size(cls, v):
        """
        Generator upsampling needs sizes divisible by four.

        :param v: Image size
        :type v: int

        :return: Validated size
        :rtype: int
        """
        if v % 4:
            raise ValueError("image_size must be a multiple of 4")
        return v


class BackboneConfig(BaseModel):
    """
    Residual backbone layout.

    The default is ResNet-18 (four stages of two basic blocks, widths 64..512)
    with the classifier removed, giving 512-dimensional embeddings.
    """

    widths: tuple[int, ...] = Field((64, 128, 256, 512), min_length=1)
    blocks: tuple[int, ...] = Field((2, 2, 2, 2), min_length=1)

    @model_validator(mode="after")
    def check_layout(self):
        """
        Widths and block counts describe the same stages.

        :return: Validated layout
        :rtype: BackboneConfig
        """
        if len(self.widths) != len(self.blocks):
            raise ValueError("widths and blocks must have the same length")
        if min(self.widths) < 1 or min(self.blocks) < 1:
            raise ValueError("widths and blocks must be positive")
        return self

    @property
    def embedding_dim(self) -> int:
        """Embedding dimension d (width of the last stage)."""
        return self.widths[-1]


class RunConfig(BaseModel):
    """
    Everything that determines one incremental-learning run.

    Field defaults follow the reference setup: lambda 0.8, student lr 1e-5,
    generator lr 1e-3, weight decay 1e-4, b=64 real and n=16 synthetic images,
    n_g=3 generator steps and n_s=20 student steps per epoch, latent size 100.
    """

    model_config = ConfigDict(populate_by_name=True, validate_assignment=True)

    name: str | None = Field(None, description="Run name (defaults to dataset-mode-seed)")
    dataset: str = Field("cifar10", description="Dataset identifier")
    protocol: SplitProtocol = Field(default_factory=SplitProtocol)
    data_root: Path | None = Field(None, description="Dataset root (overrides env)")
    image_folder: ImageFolderSpec | None = Field(None, description="image-folder layout")
    synthetic: SyntheticBlobsSpec = Field(default_factory=SyntheticBlobsSpec)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)

    epochs: int = Field(20, ge=1, description="Epochs E per task")
    kd_weight: float = Field(0.8, ge=0.0, alias="lambda", description="KD weight lambda")
    student_lr: float = Field(1e-5, gt=0.0, description="Student learning rate eta_s")
    generator_lr: float = Field(1e-3, gt=0.0, description="Generator learning rate eta_g")
    weight_decay: float = Field(1e-4, ge=0.0, description="Weight decay (both optimizers)")
    batch_size: int = Field(64, ge=2, description="Real mini-batch size b")
    synthetic_batch_size: int = Field(16, ge=2, description="Synthetic mini-batch size n")
    generator_steps: int = Field(3, ge=1, description="Generator steps n_g per epoch")
    student_steps: int = Field(20, ge=1, description="Student steps n_s per epoch")
    margin: float = Field(0.2, gt=0.0, description="Triplet margin m")
    latent_dim: int = Field(100, ge=1, description="Generator latent dimension")
    seed: int = Field(0, ge=0, description="Run seed")

    mode: TrainingMode = Field(TrainingMode.FULL, description="Training regime")
    generator_policy: GeneratorPolicy = Field(GeneratorPolicy.PER_TASK)
    attention_variant: AttentionVariant = Field(AttentionVariant.RAW)
    augment: bool = Field(False, description="Random flip + padded crop on real batches")
    freeze_norm_stats: bool = Field(
        True,
        description="Keep batch-norm running statistics of the student fixed at the teacher's "
        "values while distilling (replay modes, tasks k >= 2)",
    )

    device: str = Field("cpu", description="cpu, cuda or auto")
    output_dir: Path = Field(Path("./runs"), description="Parent of the run directory")
    checkpoint_every: int = Field(1, ge=1, description="Checkpoint every N epochs")
    eval_batch_size: int = Field(256, ge=1, description="Batch size for embedding passes")
    dump_synthetic_grids: bool = Field(False, description="Save synthetic image grids")
    strict_zero_shot: bool = Field(True, description="Raise on past-task train reads")

    @field_validator("dataset")
    @classmethod
    def check_dataset(cls, v):
        """
        Reject unknown dataset identifiers early.

        :param v: Dataset identifier
        :type v: str

        :return: Normalized identifier
        :rtype: str
        """
        v = v.lower()
        if v not in BUILTIN_DATASETS:
            raise ValueError(f"unknown dataset {v!r}; expected one of {BUILTIN_DATASETS}")
        return v

    @model_validator(mode="after")
    def check_consistency(self):
        """
        Cross-field invariants.

        :return: Validated configuration
        :rtype: RunConfig
        """
        if self.student_steps <= self.generator_steps:
            raise ValueError("student_steps (n_s) must exceed generator_steps (n_g)")
        if self.dataset == "image-folder" and self.image_folder is None:
            raise ValueError("dataset image-folder requires an image_folder section")
        if self.device not in ("cpu", "cuda", "auto"):
            raise ValueError("device must be cpu, cuda or auto")
        return self

    @property
    def run_name(self) -> str:
        """Directory name of this run."""
        return self.name or f"{self.dataset}-{self.mode.value}-seed{self.seed}"

    @property
    def run_dir(self) -> Path:
        """Run directory (``output_dir / run_name``)."""
        return self.output_dir / self.run_name

    @property
    def synthetic_real_ratio(self) -> str:
        """Synthetic-to-real images per student step, reduced (e.g. ``1:4``)."""
        divisor = math.gcd(self.synthetic_batch_size, self.batch_size)
        return f"{self.synthetic_batch_size // divisor}:{self.batch_size // divisor}"

    @classmethod
    def from_file(cls, path: Path | str) -> "RunConfig":
        """
        Load a run configuration from a JSON file.

        :param path: Configuration file
        :type path: Union[Path, str]

        :return: Parsed configuration
        :rtype: RunConfig
        """
        return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))

    def to_file(self, path: Path) -> None:
        """
        Write the configuration as JSON (the ``config.snapshot`` of a run).

        :param path: Destination file
        :type path: Path
        """
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2, by_alias=True), encoding="utf-8")


class StepMetrics(BaseModel):
    """
    One optimization step as written to ``metrics.log``.

    Components that do not apply to a step (e.g. ``L_G`` for a student step) are
    left as None and omitted from the record.
    """

    model_config = ConfigDict(populate_by_name=True)

    event: Literal["generator_step", "student_step"]
    task: int
    epoch: int
    step: int
    L_tri: float | None = None
    L_FAM: float | None = None
    L_Cov: float | None = None
    D_E: float | None = None
    L_G: float | None = None
    total: float | None = None

    def record(self) -> dict[str, Any]:
        """Payload for the metrics log."""
        return self.model_dump(exclude_none=True)


class AccuracyMatrix(BaseModel):
    """
    Lower-triangular matrix of test accuracies.

    ``rows[i - 1][j - 1]`` holds a_{i,j}: accuracy on task j's test split after
    training through task i, stored as a fraction.

    :ivar num_tasks: Total number of tasks K
    :vartype num_tasks: int
    :ivar rows: Completed rows, row i has exactly i entries
    :vartype rows: List[List[float]]
    :ivar counts: Test samples behind each entry
    :vartype counts: List[List[int]]
    """

    num_tasks: int = Field(..., ge=1, description="Total number of tasks K")
    rows: list[list[float]] = Field(default_factory=list, description="a_{i,j} rows")
    counts: list[list[int]] = Field(default_factory=list, description="Sample counts")

    @model_validator(mode="after")
    def check_shape(self):
        """
        Enforce the triangular layout and [0, 1] range.

        :return: Validated matrix
        :rtype: AccuracyMatrix
        """
        if len(self.rows) > self.num_tasks:
            raise ValueError("more rows than tasks")
        if len(self.counts) != len(self.rows):
            raise ValueError("counts must mirror rows")
        for i, (row, count) in enumerate(zip(self.rows, self.counts, strict=True), 1):
            if len(row) != i or len(count) != i:
                raise ValueError(f"row {i} must have exactly {i} entries")
            if any(not 0.0 <= a <= 1.0 for a in row):
                raise ValueError(f"row {i} has accuracies outside [0, 1]")
        return self

    def append_row(self, accuracies: list[float], counts: list[int]) -> None:
        """
        Append the row of the task that just finished.

        :param accuracies: a_{i,1..i} as fractions
        :type accuracies: List[float]
        :param counts: Test samples per entry
        :type counts: List[int]

        :raises ValueError: If the row length does not match the next task index
        """
        updated = AccuracyMatrix(
            num_tasks=self.num_tasks,
            rows=[*self.rows, list(accuracies)],
            counts=[*self.counts, list(counts)],
        )
        self.rows = updated.rows
        self.counts = updated.counts

    @property
    def completed_tasks(self) -> int:
        """Number of rows written so far."""
        return len(self.rows)

    def as_percent(self) -> list[list[float]]:
        """Rows rounded to percentages with two decimals."""
        return [[round(100.0 * a, 2) for a in row] for row in self.rows]


class SeparabilityReport(BaseModel):
    """
    Intra- versus inter-class distances of an embedding batch.

    A ratio of ``inf`` marks collapsed classes (zero intra-class distance).
    """

    model_config = ConfigDict(ser_json_inf_nan="constants")

    mean_intra: float = Field(..., ge=0.0, description="Mean within-class distance")
    mean_inter: float = Field(..., ge=0.0, description="Mean across-class distance")
    ratio: float = Field(..., description="mean_inter / mean_intra")


class RunReport(BaseModel):
    """
    Summary of one finished run, the source of ``report/results.json``.
    """

    model_config = ConfigDict(populate_by_name=True, ser_json_inf_nan="constants")

    dataset: str = Field(..., description="Dataset identifier")
    mode: TrainingMode = Field(..., description="Training regime")
    seed: int = Field(..., description="Run seed")
    average_accuracy: float | None = Field(None, alias="A_K", description="A_K fraction")
    matrix: AccuracyMatrix = Field(..., description="Accuracy matrix")
    loss_curves: dict[str, list[float]] = Field(
        default_factory=dict, description="Per-step loss components"
    )
    separability: list[float | None] = Field(
        default_factory=list, description="Inter/intra ratio after each task"
    )
    wall_clock_seconds: float = Field(0.0, ge=0.0, description="Training time")
    seeds: list[int] = Field(default_factory=list, description="Seeds for aggregation")
    config: RunConfig | None = Field(None, description="Configuration snapshot")

    def write(self, path: Path) -> None:
        """
        Write the report as JSON.

        :param path: Destination file
        :type path: Path
        """
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2, by_alias=True), encoding="utf-8")

    @classmethod
    def read(cls, path: Path) -> "RunReport":
        """
        Load a report written by :meth:`write`.

        :param path: JSON file
        :type path: Path

        :return: Parsed report
        :rtype: RunReport
        """
        return cls.model_validate_json(path.read_text(encoding="utf-8"))
