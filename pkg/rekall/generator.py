"""
Replay generator.

A decoder-only generator maps latent vectors z ~ N(0, I) to synthetic images of
the stream's shape. It is trained adversarially to maximize the embedding
distance between teacher and student, so its samples land where the student
drifts from the teacher.
"""

import logging
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .distillation import EmbeddingPair, embedding_distance
from .exceptions import GeneratorDivergenceError, SamplingError, ShapeMismatchError

logger = logging.getLogger(__name__)

LATENT_DIM = 100


class ReplayGenerator(nn.Module):
    """
    Three transposed convolutions: (latent, 1, 1) -> (4w, H/4, W/4) -> (2w, H/2, W/2)
    -> (C, H, W), with batch norm and ReLU in between and a tanh output mapped
    onto the normalized pixel range of the stream.
    """

    def __init__(
        self,
        image_shape: tuple[int, int, int],
        channel_mean: Sequence[float],
        channel_std: Sequence[float],
        latent_dim: int = LATENT_DIM,
        width: int = 64,
    ):
        super().__init__()
        channels, height, width_px = image_shape
        if height % 4 or width_px % 4:
            raise ShapeMismatchError("generator output size must be divisible by 4")
        if len(channel_mean) != channels or len(channel_std) != channels:
            raise ShapeMismatchError("normalization statistics do not match channels")
        self.image_shape = image_shape
        self.latent_dim = latent_dim
        self.net = nn.Sequential(
            nn.ConvTranspose2d(latent_dim, 4 * width, (height // 4, width_px // 4), bias=False),
            nn.BatchNorm2d(4 * width),
            nn.ReLU(True),
            nn.ConvTranspose2d(4 * width, 2 * width, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(2 * width),
            nn.ReLU(True),
            nn.ConvTranspose2d(2 * width, channels, 4, stride=2, padding=1),
            nn.Tanh(),
        )
        self.register_buffer("mean", torch.tensor(channel_mean).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(channel_std).view(1, -1, 1, 1))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ShapeMismatchError(
                f"expected latents of shape (n, {self.latent_dim}), got {tuple(z.shape)}"
            )
        pixels = (self.net(z[:, :, None, None]) + 1.0) / 2.0
        return (pixels - self.mean) / self.std

    def output_bounds(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-channel (low, high) of the normalized output range."""
        return (0.0 - self.mean) / self.std, (1.0 - self.mean) / self.std


@dataclass
class GeneratorState:
    """The generator G(.; phi) and its optimizer."""

    module: ReplayGenerator
    optimizer: torch.optim.Optimizer

    @classmethod
    def create(
        cls,
        image_shape: tuple[int, int, int],
        channel_mean: Sequence[float],
        channel_std: Sequence[float],
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        latent_dim: int = LATENT_DIM,
        seed: int | None = None,
        device: torch.device | str = "cpu",
    ) -> "GeneratorState":
        """
        Build a freshly initialized generator with an Adam optimizer.

        :param image_shape: (C, H, W) of the stream
        :type image_shape: Tuple[int, int, int]
        :param lr: Learning rate eta_g
        :type lr: float
        :param weight_decay: Weight decay
        :type weight_decay: float
        :param seed: Initialization seed
        :type seed: Optional[int]

        :return: New generator state
        :rtype: GeneratorState
        """
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            module = ReplayGenerator(image_shape, channel_mean, channel_std, latent_dim)
        module.to(device)
        optimizer = torch.optim.Adam(module.parameters(), lr=lr, weight_decay=weight_decay)
        return cls(module=module, optimizer=optimizer)


def sample_latent(
    n: int, generator: torch.Generator, latent_dim: int = LATENT_DIM
) -> torch.Tensor:
    """
    Draw n standard-normal latent vectors.

    :param n: Number of latents, n >= 1
    :type n: int
    :param generator: Seeded source of randomness
    :type generator: torch.Generator
    :param latent_dim: Latent dimension
    :type latent_dim: int

    :return: Tensor (n, latent_dim)
    :rtype: torch.Tensor

    :raises SamplingError: For n < 1
    """
    if n < 1:
        raise SamplingError("need at least one latent vector")
    return torch.randn(n, latent_dim, generator=generator)


def generate(state: GeneratorState, z: torch.Tensor) -> torch.Tensor:
    """Synthetic images x_g = G(z; phi), differentiable with respect to phi."""
    device = next(state.module.parameters()).device
    return state.module(z.to(device))


@contextmanager
def frozen(model: nn.Module) -> Iterator[nn.Module]:
    """
    Disable parameter gradients and switch to eval mode, restoring both on exit.

    Inputs still receive gradients through a frozen model.
    """
    flags = [p.requires_grad for p in model.parameters()]
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, flag in zip(model.parameters(), flags, strict=True):
            p.requires_grad_(flag)
        model.train(was_training)


def generator_loss(
    state: GeneratorState, student: nn.Module, teacher: nn.Module, z: torch.Tensor
) -> torch.Tensor:
    """L_G = -D_E(M_k(G(z)), M_{k-1}(G(z))), differentiable with respect to phi."""
    x_g = generate(state, z)
    z_s, _ = student(x_g)
    z_t, _ = teacher(x_g)
    return -embedding_distance(EmbeddingPair(student=z_s, teacher=z_t))


def generator_step(
    state: GeneratorState, student: nn.Module, teacher: nn.Module, z: torch.Tensor
) -> float:
    """
    One adversarial update of phi: minimize L_G = -D_E(M_k(x_g), M_{k-1}(x_g)).

    Student and teacher parameters are frozen for the step; only the generator's
    optimizer steps.

    :param state: Generator and optimizer
    :type state: GeneratorState
    :param student: Current model M_k
    :type student: EmbeddingBackbone
    :param teacher: Frozen previous model M_{k-1}
    :type teacher: EmbeddingBackbone
    :param z: Latent batch
    :type z: torch.Tensor

    :return: L_G before the update (always <= 0)
    :rtype: float

    :raises GeneratorDivergenceError: On a non-finite loss
    """
    state.module.train()
    with frozen(student), frozen(teacher):
        loss_g = generator_loss(state, student, teacher, z)
        if not torch.isfinite(loss_g):
            raise GeneratorDivergenceError(f"generator loss is {loss_g.item()}")
        state.optimizer.zero_grad()
        loss_g.backward()
        state.optimizer.step()
    return float(loss_g.item())


def save_grid(images: torch.Tensor, generator: ReplayGenerator, path: Path, nrow: int = 8) -> Path:
    """
    Write a batch of synthetic images as one PNG grid, in pixel space.

    :param images: Normalized images (n, C, H, W)
    :type images: torch.Tensor
    :param generator: Generator providing the normalization statistics
    :type generator: ReplayGenerator
    :param path: Destination file
    :type path: Path

    :return: ``path``
    :rtype: Path
    """
    from torchvision.utils import save_image

    pixels = images.detach() * generator.std + generator.mean
    path.parent.mkdir(parents=True, exist_ok=True)
    save_image(pixels.clamp(0.0, 1.0).cpu(), str(path), nrow=nrow)
    return path
