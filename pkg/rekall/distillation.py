"""
Knowledge-distillation losses between the frozen teacher and the student.

Feature attention matching compares per-sample normalized feature maps layer by
layer; the covariance penalty pushes off-diagonal embedding covariances towards
zero; the embedding distance D_E is shared with the generator objective.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import ShapeMismatchError
from .models import AttentionVariant, TrainingMode

NORM_EPS = 1e-8


@dataclass
class EmbeddingPair:
    """Student and teacher embeddings of the same synthetic batch."""

    student: torch.Tensor
    teacher: torch.Tensor

    def __post_init__(self) -> None:
        if self.student.shape != self.teacher.shape or self.student.dim() != 2:
            raise ShapeMismatchError(
                f"embedding pair shapes differ: {tuple(self.student.shape)} vs "
                f"{tuple(self.teacher.shape)}"
            )


@dataclass
class KDLoss:
    """
    Distillation loss with its components.

    ``total`` is what enters the gradient; in the ablation modes the excluded
    component is still reported, detached.
    """

    total: torch.Tensor
    fam: torch.Tensor
    cov: torch.Tensor


def _attention(feature_map: torch.Tensor, variant: AttentionVariant) -> torch.Tensor:
    if variant == AttentionVariant.CHANNEL_ENERGY:
        feature_map = feature_map.pow(2).mean(1)
    return F.normalize(feature_map.flatten(1), p=2, dim=1, eps=NORM_EPS)


def feature_attention_loss(
    teacher_maps: list[torch.Tensor],
    student_maps: list[torch.Tensor],
    variant: AttentionVariant = AttentionVariant.RAW,
) -> torch.Tensor:
    """
    Sum over layers of the batch-mean distance between normalized maps.

    :param teacher_maps: Teacher feature maps A_l^T (gradients are not propagated)
    :type teacher_maps: List[torch.Tensor]
    :param student_maps: Student feature maps A_l^S
    :type student_maps: List[torch.Tensor]
    :param variant: ``raw`` compares flattened maps, ``channel_energy`` compares
        channel-averaged squared activations
    :type variant: AttentionVariant

    :return: Scalar >= 0
    :rtype: torch.Tensor

    :raises ShapeMismatchError: If layer counts or shapes differ
    """
    if len(teacher_maps) != len(student_maps) or not teacher_maps:
        raise ShapeMismatchError(
            f"teacher has {len(teacher_maps)} layers, student {len(student_maps)}"
        )
    total = student_maps[0].new_zeros(())
    for layer, (a_t, a_s) in enumerate(zip(teacher_maps, student_maps, strict=True)):
        if a_t.shape != a_s.shape:
            raise ShapeMismatchError(
                f"layer {layer}: teacher {tuple(a_t.shape)} vs student {tuple(a_s.shape)}"
            )
        diff = _attention(a_t.detach(), variant) - _attention(a_s, variant)
        total = total + torch.linalg.vector_norm(diff, dim=1).mean()
    return total


def covariance_matrix(z: torch.Tensor) -> torch.Tensor:
    """
    Unbiased covariance C(Z) = 1/(n-1) sum (z_i - m)(z_i - m)^T.

    :param z: Embeddings (n, d), n >= 2
    :type z: torch.Tensor

    :return: Symmetric (d, d) matrix
    :rtype: torch.Tensor
    """
    if z.dim() != 2 or z.shape[0] < 2:
        raise ShapeMismatchError("covariance needs a (n, d) matrix with n >= 2")
    centered = z - z.mean(dim=0, keepdim=True)
    return centered.T @ centered / (z.shape[0] - 1)


def covariance_penalty(z: torch.Tensor) -> torch.Tensor:
    """
    c(Z) = (1/d) * sum of squared off-diagonal entries of C(Z).

    :param z: Embeddings (n, d), n >= 2
    :type z: torch.Tensor

    :return: Scalar >= 0
    :rtype: torch.Tensor
    """
    cov = covariance_matrix(z)
    off_diagonal = cov - torch.diag(torch.diag(cov))
    return off_diagonal.pow(2).sum() / z.shape[1]


def covariance_loss(pair: EmbeddingPair) -> torch.Tensor:
    """c(Z_student) + c(Z_teacher); the teacher term carries no gradient."""
    return covariance_penalty(pair.student) + covariance_penalty(pair.teacher.detach())


def embedding_distance(pair: EmbeddingPair) -> torch.Tensor:
    """
    Batch mean of row-wise Euclidean distances between student and teacher.

    Gradients reach both sides; the generator objective needs them through the
    teacher as well.
    """
    return torch.linalg.vector_norm(pair.student - pair.teacher, dim=1).mean()


def kd_loss(
    teacher_maps: list[torch.Tensor],
    student_maps: list[torch.Tensor],
    pair: EmbeddingPair,
    mode: TrainingMode = TrainingMode.FULL,
    variant: AttentionVariant = AttentionVariant.RAW,
) -> KDLoss:
    """
    L_KD = L_FAM + L_Cov, or one of the two for the ablation modes.

    :param teacher_maps: Teacher feature maps on x_g
    :type teacher_maps: List[torch.Tensor]
    :param student_maps: Student feature maps on x_g
    :type student_maps: List[torch.Tensor]
    :param pair: Embeddings on x_g
    :type pair: EmbeddingPair
    :param mode: full, fam_only or cov_only
    :type mode: TrainingMode
    :param variant: Attention representation for L_FAM
    :type variant: AttentionVariant

    :return: Total and components
    :rtype: KDLoss
    """
    if mode == TrainingMode.COV_ONLY:
        with torch.no_grad():
            fam = feature_attention_loss(teacher_maps, student_maps, variant)
    else:
        fam = feature_attention_loss(teacher_maps, student_maps, variant)

    if mode == TrainingMode.FAM_ONLY:
        with torch.no_grad():
            cov = covariance_loss(pair)
    else:
        cov = covariance_loss(pair)

    if mode == TrainingMode.FAM_ONLY:
        total = fam
    elif mode == TrainingMode.COV_ONLY:
        total = cov
    else:
        total = fam + cov
    return KDLoss(total=total, fam=fam, cov=cov)
