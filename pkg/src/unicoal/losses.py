"""Adversarial, pixel and structure-feature objectives plus target blurring."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .config import LossConfig
from .features import FeatureExtractor


def adv_d_loss(logits_real: torch.Tensor, logits_fake: torch.Tensor,
               grad_norm_sq_real: torch.Tensor | float = 0.0, gamma_g: float = 0.0) -> torch.Tensor:
    """Non-saturating discriminator loss with R1 penalty.

    ``-log sigmoid(real) - log(1 - sigmoid(fake)) + gamma/2 * ||grad D(real)||^2``,
    each term averaged over the batch; the log terms use softplus forms.
    """
    loss = F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()
    if gamma_g:
        loss = loss + gamma_g / 2 * torch.as_tensor(grad_norm_sq_real).mean()
    return loss


def adv_g_loss(logits_fake: torch.Tensor) -> torch.Tensor:
    """``-log sigmoid(fake)``, the minimization form of the generator objective."""
    return F.softplus(-logits_fake).mean()


def r1_grad_norm_sq(logits_real: torch.Tensor, inputs) -> torch.Tensor:
    """Per-sample squared gradient norm of the real logits wrt ``inputs``."""
    if isinstance(inputs, torch.Tensor):
        inputs = [inputs]
    grads = torch.autograd.grad(logits_real.sum(), inputs, create_graph=True)
    return sum(g.square().flatten(1).sum(1) for g in grads)


def pixel_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def rearrange_grid(x: torch.Tensor) -> torch.Tensor:
    """Tile ``b x c x h x w`` into a ``1 x c x h*sqrt(b) x w*sqrt(b)`` mosaic, row-major."""
    b, c, h, w = x.shape
    side = math.isqrt(b)
    if side * side != b:
        raise ValueError(f"batch {b} is not a perfect square; use square_subbatch() first")
    x = x.reshape(side, side, c, h, w).permute(2, 0, 3, 1, 4)
    return x.reshape(1, c, side * h, side * w)


def square_subbatch(b: int) -> int:
    return math.isqrt(b) ** 2


def sam_loss(pred: torch.Tensor, target: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """L1 distance between extractor features of the prediction and target mosaics.

    Only the leading ``isqrt(b)**2`` samples contribute when ``b`` is not square.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim == 3:
        pred, target = pred[:, None], target[:, None]
    n = square_subbatch(pred.shape[0])
    fp = extractor(extractor.prepare(rearrange_grid(pred[:n])))
    with torch.no_grad():
        ft = extractor(extractor.prepare(rearrange_grid(target[:n])))
    return (fp - ft).abs().mean()


def total_g_loss(adv, pix, sam, cfg: LossConfig):
    return adv + cfg.lambda1 * pix + cfg.lambda2 * sam


def blur_sigma(images_seen: int, cfg: LossConfig) -> float:
    """Linear decay of the blur sigma from ``blur_sigma0`` to 0 over ``blur_images``."""
    if images_seen < 0:
        raise ValueError("images_seen must be >= 0")
    if cfg.blur_images == 0:
        return 0.0
    return cfg.blur_sigma0 * max(0.0, 1.0 - images_seen / cfg.blur_images)


def gaussian_kernel1d(sigma: float) -> torch.Tensor:
    radius = math.ceil(3 * sigma)
    t = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflective borders, radius ``ceil(3 sigma)``."""
    if sigma <= 0:
        return x
    k = gaussian_kernel1d(sigma).to(x.dtype)
    r = (len(k) - 1) // 2
    shape = x.shape
    y = x.reshape(-1, 1, *shape[-2:])
    y = F.conv2d(F.pad(y, (r, r, 0, 0), mode="reflect"), k.view(1, 1, 1, -1))
    y = F.conv2d(F.pad(y, (0, 0, r, r), mode="reflect"), k.view(1, 1, -1, 1))
    return y.reshape(shape)
