"""Building blocks shared by the generator and discriminator."""

from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

DEMOD_EPS = 1e-8


def normalize_2nd_moment(x: torch.Tensor, dim: int = 1, eps: float = 1e-8) -> torch.Tensor:
    return x * (x.square().mean(dim=dim, keepdim=True) + eps).rsqrt()


class FullyConnected(nn.Module):
    """Linear layer with equalized learning rate."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 activation: str = "linear", lr_multiplier: float = 1.0,
                 bias_init: float = 0.0):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.weight = nn.Parameter(torch.randn(out_features, in_features) / lr_multiplier)
        self.bias = nn.Parameter(torch.full([out_features], float(bias_init) / lr_multiplier)) if bias else None
        self.weight_gain = lr_multiplier / math.sqrt(in_features)
        self.bias_gain = lr_multiplier

    def forward(self, x):
        w = self.weight * self.weight_gain
        b = self.bias * self.bias_gain if self.bias is not None else None
        x = F.linear(x, w, b)
        if self.activation == "lrelu":
            x = F.leaky_relu(x, 0.2) * math.sqrt(2)
        return x

    def extra_repr(self):
        return f"in={self.in_features}, out={self.out_features}, act={self.activation}"


class MagnitudeNorm(nn.Module):
    """Scales activations to unit mean square.

    Training uses the current batch's magnitude (detached) and tracks a running
    average during gradient-enabled passes; evaluation uses the running value.
    Without it, small weight updates compound multiplicatively over the layer
    stack and can drive a saturating output head into its flat region within a
    handful of steps.
    """

    def __init__(self, beta: float = 0.99, eps: float = 1e-8):
        super().__init__()
        self.beta = beta
        self.eps = eps
        self.register_buffer("magnitude_ema", torch.ones(()))

    def forward(self, x):
        if self.training:
            mag = x.detach().square().mean()
            if torch.is_grad_enabled():
                with torch.no_grad():
                    self.magnitude_ema.copy_(mag.lerp(self.magnitude_ema, self.beta))
        else:
            mag = self.magnitude_ema
        return x * (mag + self.eps).rsqrt()


class Conv2d(nn.Module):
    """Plain convolution with equalized learning rate, optional 2x average-pool downsampling."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 bias: bool = True, activation: str = "linear", down: bool = False):
        super().__init__()
        self.activation = activation
        self.down = down
        self.padding = kernel_size // 2
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        self.weight_gain = 1 / math.sqrt(in_channels * kernel_size ** 2)

    def forward(self, x):
        x = F.conv2d(x, self.weight * self.weight_gain, self.bias, padding=self.padding)
        if self.down:
            x = F.avg_pool2d(x, 2)
        if self.activation == "lrelu":
            x = F.leaky_relu(x, 0.2) * math.sqrt(2)
        return x


def demodulate(weight: torch.Tensor, styles: torch.Tensor, eps: float = DEMOD_EPS) -> torch.Tensor:
    """Scale input channels by ``styles`` and renormalize each output channel.

    ``weight`` is ``[O, I, kh, kw]`` and ``styles`` is ``[I]`` or ``[B, I]``.
    Returns ``w'[b, o, i, :, :] = s[b, i] w[o, i] / sqrt(sum_{i,k} (s[b, i] w[o, i, k])^2 + eps)``.
    """
    batched = styles.ndim == 2
    s = styles if batched else styles[None]
    w = weight[None] * s[:, None, :, None, None]
    sq = w.square().sum(dim=[2, 3, 4], keepdim=True)
    if not torch.is_grad_enabled() and bool((sq == 0).any()):
        logger.debug("demodulation: all-zero modulated weights for some output channel")
    w = w * (sq + eps).rsqrt()
    return w if batched else w[0]


def demodulate_np(weight: np.ndarray, styles: np.ndarray, eps: float = DEMOD_EPS) -> np.ndarray:
    """NumPy reference of :func:`demodulate` for a single style vector."""
    w = weight * styles[None, :, None, None]
    return w / np.sqrt(np.sum(w ** 2, axis=(1, 2, 3), keepdims=True) + eps)


def modulated_conv2d(x: torch.Tensor, weight: torch.Tensor, styles: torch.Tensor,
                     demod: bool = True, pad_mode: str = "replicate") -> torch.Tensor:
    """Per-sample modulated convolution as one grouped conv; spatial size is preserved."""
    batch, in_ch = x.shape[:2]
    out_ch, _, kh, kw = weight.shape
    if demod:
        w = demodulate(weight, styles)
    else:
        w = weight[None] * styles[:, None, :, None, None]
    if kh > 1 or kw > 1:
        x = F.pad(x, (kw // 2, kw // 2, kh // 2, kh // 2), mode=pad_mode)
    x = x.reshape(1, batch * in_ch, *x.shape[2:])
    y = F.conv2d(x, w.reshape(batch * out_ch, in_ch, kh, kw), groups=batch)
    return y.reshape(batch, out_ch, *y.shape[2:])


def delta_embedding(delta: torch.Tensor, num_freqs: int = 8) -> torch.Tensor:
    """Sinusoidal features of the relative slice offset: ``[sin, cos](2^k * pi * delta)``."""
    freqs = math.pi * 2.0 ** torch.arange(num_freqs, dtype=delta.dtype, device=delta.device)
    ang = delta[:, None] * freqs[None]
    return torch.cat([ang.sin(), ang.cos()], dim=1)
