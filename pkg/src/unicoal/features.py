"""Feature extractors for the structure-feature loss.

An extractor maps ``[1, C, H, W]`` images to feature tensors.  It advertises
how many input channels it expects and the square input size it needs (or
``None`` for any size).  The pretrained promptable-segmentation encoder is
loaded only when its package and checkpoint are available; otherwise a
deterministic stub stands in.
"""

from __future__ import annotations

import logging
import math

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)


class FeatureExtractor(nn.Module):
    in_channels: int = 1
    input_size: int | None = None

    def prepare(self, x: torch.Tensor) -> torch.Tensor:
        """Replicate channels and resize to the extractor's input geometry."""
        if x.shape[1] != self.in_channels:
            if x.shape[1] != 1:
                raise ValueError(f"cannot adapt {x.shape[1]} channels to {self.in_channels}")
            x = x.expand(-1, self.in_channels, -1, -1)
        if self.input_size is not None and x.shape[-2:] != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear",
                              align_corners=False)
        return x


class IdentityExtractor(FeatureExtractor):
    def forward(self, x):
        return x


class StubExtractor(FeatureExtractor):
    """Fixed-seed random convolutional projection; never trained."""

    def __init__(self, channels: int = 16, seed: int = 0, in_channels: int = 1):
        super().__init__()
        self.in_channels = in_channels
        g = torch.Generator().manual_seed(seed)
        w1 = torch.randn(channels, in_channels, 3, 3, generator=g) / math.sqrt(9 * in_channels)
        w2 = torch.randn(channels, channels, 3, 3, generator=g) / math.sqrt(9 * channels)
        self.register_buffer("w1", w1)
        self.register_buffer("w2", w2)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        x = F.leaky_relu(F.conv2d(x, self.w1, padding=1), 0.2)
        return F.conv2d(x, self.w2, padding=1, stride=2)


class SamImageEncoder(FeatureExtractor):
    """ViT image encoder from a promptable-segmentation checkpoint."""

    in_channels = 3
    input_size = 1024

    def __init__(self, checkpoint: str, model_type: str = "vit_b"):
        super().__init__()
        from segment_anything import sam_model_registry

        sam = sam_model_registry[model_type](checkpoint=checkpoint)
        self.encoder = sam.image_encoder.eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor([123.675, 116.28, 103.53]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([58.395, 57.12, 57.375]).view(1, 3, 1, 1))

    def forward(self, x):
        # [-1, 1] slices -> 0..255 RGB-like range expected by the encoder
        x = (x + 1) * 127.5
        return self.encoder((x - self.mean) / self.std)


def build_extractor(backend: str = "stub", checkpoint: str | None = None, model_type: str = "vit_b",
                    stub_seed: int = 0, stub_channels: int = 16) -> FeatureExtractor:
    if backend == "identity":
        return IdentityExtractor()
    if backend == "sam":
        try:
            if not checkpoint:
                raise FileNotFoundError("sam.checkpoint is not set")
            return SamImageEncoder(checkpoint, model_type)
        except (ImportError, FileNotFoundError, OSError, KeyError, RuntimeError) as exc:
            logger.warning("segmentation encoder unavailable (%s); falling back to stub extractor", exc)
            return StubExtractor(stub_channels, stub_seed)
    if backend == "stub":
        return StubExtractor(stub_channels, stub_seed)
    raise ValueError(f"unknown extractor backend {backend!r}")
