"""Conditional projection discriminator over (input window, candidate slice) pairs."""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import ModelConfig
from .layers import Conv2d, FullyConnected


def minibatch_group_size(batch: int, group: int = 4) -> int:
    """Largest group size <= ``group`` that divides the batch."""
    g = min(group, batch)
    while batch % g:
        g -= 1
    return g


def minibatch_stddev(x: torch.Tensor, group: int = 4, eps: float = 1e-8) -> torch.Tensor:
    """Per-group feature standard deviation, averaged to one channel.

    Identical samples within a group give exactly zero.
    """
    n, c, h, w = x.shape
    g = minibatch_group_size(n, group)
    y = x.reshape(g, n // g, c, h, w)
    y = y - y.mean(dim=0)
    var = y.square().mean(dim=0)
    eps_t = torch.tensor(eps, dtype=x.dtype, device=x.device)
    std = (var + eps_t).sqrt() - eps_t.sqrt()
    std = std.mean(dim=[1, 2, 3])                 # [n // g]
    return std.repeat(g).reshape(n, 1, 1, 1).expand(n, 1, h, w)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels, out_channels, down: bool):
        super().__init__()
        self.conv0 = Conv2d(in_channels, in_channels, 3, activation="lrelu")
        self.conv1 = Conv2d(in_channels, out_channels, 3, activation="lrelu", down=down)
        self.skip = Conv2d(in_channels, out_channels, 1, bias=False, down=down)

    def forward(self, x):
        y = self.skip(x)
        x = self.conv1(self.conv0(x))
        return (x + y) / math.sqrt(2)


class Discriminator(nn.Module):
    """Residual trunk, minibatch-stddev epilogue and a projection head.

    ``logit = psi(phi) + <v, P phi>`` where ``phi`` are the trunk features and
    ``v`` is the embedded attribute of the target slice.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        res = cfg.resolution

        def ch(r):
            return int(min(cfg.d_channel_base // r, cfg.d_channel_max))

        self.from_image = Conv2d(cfg.window + 1, ch(res), 1, activation="lrelu")
        blocks = []
        for _ in range(cfg.d_blocks):
            down = res > 4
            blocks.append(ResidualBlock(ch(res), ch(res // 2 if down else res), down))
            res = res // 2 if down else res
        if res != 4:
            raise ValueError(f"{cfg.d_blocks} blocks cannot reach 4x4 from {cfg.resolution}")
        self.blocks = nn.ModuleList(blocks)
        c4 = ch(4)
        self.conv = Conv2d(c4 + 1, c4, 3, activation="lrelu")
        self.fc = FullyConnected(c4 * 16, cfg.d_feature_dim, activation="lrelu")
        self.psi = FullyConnected(cfg.d_feature_dim, 1)
        self.proj = FullyConnected(cfg.d_feature_dim, cfg.w_dim, bias=False)
        self.proj_gain = 1 / math.sqrt(cfg.w_dim)

    def features(self, window: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if candidate.ndim == 3:
            candidate = candidate[:, None]
        if window.shape[-2:] != candidate.shape[-2:]:
            raise ValueError("candidate and window slices differ in shape")
        x = self.from_image(torch.cat([window, candidate], dim=1))
        for block in self.blocks:
            x = block(x)
        x = torch.cat([x, minibatch_stddev(x, self.cfg.mbstd_group)], dim=1)
        return self.fc(self.conv(x).flatten(1))

    def projection(self, phi: torch.Tensor) -> torch.Tensor:
        """``P phi``; the logit is linear in ``v`` with this slope."""
        return self.proj(phi) * self.proj_gain

    def forward(self, window, candidate, v):
        phi = self.features(window, candidate)
        return self.psi(phi)[:, 0] + (v * self.projection(phi)).sum(dim=1)
