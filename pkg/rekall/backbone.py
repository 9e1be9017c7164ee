"""
Residual embedding backbone.

A ResNet built from basic blocks with the classifier and the final fully
connected layer removed: the global-average-pooled output of the last stage is
the embedding. The stem is the small-image variant (3x3 convolution, stride 1,
no max-pool) so 32x32 inputs keep usable spatial resolution.
"""

import hashlib
import logging

import torch
import torch.nn as nn

from .exceptions import NonFiniteError, ShapeMismatchError
from .models import BackboneConfig

logger = logging.getLogger(__name__)


def conv3x3(in_planes: int, out_planes: int, stride: int = 1) -> nn.Conv2d:
    """3x3 convolution with padding"""
    return nn.Conv2d(in_planes, out_planes, kernel_size=3, stride=stride, padding=1, bias=False)


def conv1x1(in_planes: int, out_planes: int, stride: int = 1) -> nn.Conv2d:
    """1x1 convolution"""
    return nn.Conv2d(in_planes, out_planes, kernel_size=1, stride=stride, bias=False)


class BasicBlock(nn.Module):
    def __init__(self, inplanes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(inplanes, planes, stride)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU()
        self.conv2 = conv3x3(planes, planes)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample: nn.Module | None = None
        if stride != 1 or inplanes != planes:
            self.downsample = nn.Sequential(
                conv1x1(inplanes, planes, stride), nn.BatchNorm2d(planes)
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class EmbeddingBackbone(nn.Module):
    """
    Convolutional embedding network f_theta.

    ``forward`` returns the embedding matrix Z of shape (batch, d) and the ordered
    feature maps of every convolutional stage output before the final average
    pooling: the stem followed by each residual block.

    :ivar embedding_dim: Embedding dimension d
    :vartype embedding_dim: int
    :ivar in_channels: Expected input channels
    :vartype in_channels: int
    """

    def __init__(self, in_channels: int = 3, layout: BackboneConfig | None = None):
        """
        Build the network.

        :param in_channels: Image channels
        :type in_channels: int
        :param layout: Stage widths and block counts, ResNet-18 by default
        :type layout: Optional[BackboneConfig]
        """
        super().__init__()
        layout = layout or BackboneConfig()
        self.layout = layout
        self.in_channels = in_channels
        self.embedding_dim = layout.embedding_dim

        stem_width = layout.widths[0]
        self.stem = nn.Sequential(
            conv3x3(in_channels, stem_width), nn.BatchNorm2d(stem_width), nn.ReLU()
        )
        blocks: list[nn.Module] = []
        inplanes = stem_width
        for stage, (width, count) in enumerate(zip(layout.widths, layout.blocks, strict=True)):
            for i in range(count):
                stride = 2 if stage > 0 and i == 0 else 1
                blocks.append(BasicBlock(inplanes, width, stride))
                inplanes = width
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.constant_(m.weight, 1)
                nn.init.constant_(m.bias, 0)

    @property
    def num_taps(self) -> int:
        """Number of tapped feature maps N_L."""
        return 1 + len(self.blocks)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"expected input (batch, {self.in_channels}, H, W), got {tuple(x.shape)}"
            )
        out = self.stem(x)
        feature_maps = [out]
        for block in self.blocks:
            out = block(out)
            feature_maps.append(out)
        z = torch.flatten(self.pool(out), 1)
        return z, feature_maps


def build_backbone(
    in_channels: int, layout: BackboneConfig | None = None, seed: int | None = None
) -> EmbeddingBackbone:
    """
    Create a backbone, optionally with seeded initialization.

    :param in_channels: Image channels
    :type in_channels: int
    :param layout: Stage layout
    :type layout: Optional[BackboneConfig]
    :param seed: Initialization seed
    :type seed: Optional[int]

    :return: Freshly initialized backbone
    :rtype: EmbeddingBackbone
    """
    if seed is None:
        return EmbeddingBackbone(in_channels, layout)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EmbeddingBackbone(in_channels, layout)


def parameter_checksum(model: nn.Module) -> str:
    """
    SHA-256 over every parameter and buffer, in state-dict order.

    :param model: Module to fingerprint
    :type model: nn.Module

    :return: Hex digest
    :rtype: str
    """
    digest = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def check_finite(z: torch.Tensor, what: str = "embeddings") -> None:
    """
    Raise when a tensor holds NaN or infinity.

    :raises NonFiniteError: On non-finite entries
    """
    if not torch.isfinite(z).all():
        raise NonFiniteError(f"non-finite {what}")
