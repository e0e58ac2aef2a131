"""Reconstruction metrics and evaluation reports."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import MRVolume

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["psnr", "ssim", "data_range", "shape"],
    "properties": {
        "psnr": {"type": "number", "maximum": PSNR_CAP_DB},
        "ssim": {"type": "number", "minimum": -1, "maximum": 1},
        "dsc": {"type": "number", "minimum": 0, "maximum": 1},
        "data_range": {"type": "number", "exclusiveMinimum": 0},
        "shape": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
        "contact_sheet": {"type": "string"},
    },
    "additionalProperties": False,
}


def _array(x) -> np.ndarray:
    return np.asarray(x.voxels if isinstance(x, MRVolume) else x, dtype=np.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a, b, data_range: float = 2.0) -> float:
    """``10 log10(range^2 / MSE)`` in dB, capped at 100 dB (identical inputs hit the cap)."""
    a, b = _array(a), _array(b)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10 * math.log10(data_range ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 2.0, size: int = SSIM_WINDOW,
             sigma: float = SSIM_SIGMA) -> np.ndarray:
    """SSIM over every full window position of a 2D pair (no padding)."""
    if a.ndim != 2:
        raise ValueError("ssim_map expects 2D slices")
    if min(a.shape) < size:
        raise ValueError(f"slice {a.shape} smaller than the {size}x{size} window")
    g = gaussian_window(size, sigma)
    r = size // 2

    def filt(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="constant")
        y = ndimage.correlate1d(y, g, axis=1, mode="constant")
        return y[r:x.shape[0] - r, r:x.shape[1] - r]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, data_range: float = 2.0, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean SSIM with a Gaussian window, averaged over slices (axis 0 of 3D input)."""
    a, b = _array(a), _array(b)
    _same_shape(a, b)
    if a.ndim == 2:
        return float(ssim_map(a, b, data_range, size, sigma).mean())
    return float(np.mean([ssim_map(x, y, data_range, size, sigma).mean() for x, y in zip(a, b)]))


def _binary(mask) -> np.ndarray:
    m = np.asarray(mask.voxels if isinstance(mask, MRVolume) else mask)
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be binary (values 0/1)")
        m = m.astype(bool)
    return m


def dsc(mask_a, mask_b) -> float:
    """Dice overlap ``2|A n B| / (|A| + |B|)``; two empty masks give 1."""
    a, b = _binary(mask_a), _binary(mask_b)
    _same_shape(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def contact_sheet(pred, gt, path) -> Path:
    """PNG with central axial and sagittal slices of prediction, truth and error."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    p, g = _array(pred), _array(gt)
    views = {
        "axial": (p[p.shape[0] // 2], g[g.shape[0] // 2]),
        "sagittal": (p[:, :, p.shape[2] // 2], g[:, :, g.shape[2] // 2]),
    }
    fig, axes = plt.subplots(2, 3, figsize=(9, 6))
    for row, (name, (ps, gs)) in enumerate(views.items()):
        for col, (title, img, cmap) in enumerate((("prediction", ps, "gray"), ("ground truth", gs, "gray"),
                                                  ("|error|", np.abs(ps - gs), "magma"))):
            ax = axes[row, col]
            ax.imshow(img, cmap=cmap, aspect="auto")
            ax.set_title(f"{name}: {title}", fontsize=9)
            ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80)
    plt.close(fig)
    return path


def evaluate(pred, gt, pred_mask=None, gt_mask=None, data_range: float = 2.0,
             sheet_path=None) -> dict:
    """Metric report for a predicted volume; DSC is included when both masks are given."""
    p, g = _array(pred), _array(gt)
    _same_shape(p, g)
    if p.ndim != 3:
        raise ValueError("evaluate expects S x H x W volumes")
    report = {"psnr": psnr(p, g, data_range), "ssim": ssim(p, g, data_range),
              "data_range": float(data_range), "shape": list(p.shape)}
    if (pred_mask is None) != (gt_mask is None):
        raise ValueError("provide both masks or neither")
    if pred_mask is not None:
        report["dsc"] = dsc(pred_mask, gt_mask)
    if sheet_path:
        report["contact_sheet"] = str(contact_sheet(p, g, sheet_path))
    return report


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return path
