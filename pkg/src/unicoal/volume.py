"""MR volumes, target-slice geometry and input-window extraction."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_MODALITIES = ("T1", "T2", "FLAIR", "PD")
DEFAULT_WINDOW = 4


@dataclass
class MRVolume:
    """An ``S x H x W`` intensity grid; axis 0 runs through-plane."""

    voxels: np.ndarray
    modality: str
    thickness_mm: float = 1.0
    inplane_spacing_mm: tuple[float, float] = (1.0, 1.0)
    volume_id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"voxels must be a non-empty S x H x W array, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("voxels contain non-finite values")
        if not self.thickness_mm > 0:
            raise ValueError(f"thickness_mm must be positive, got {self.thickness_mm}")
        self.thickness_mm = float(self.thickness_mm)
        self.inplane_spacing_mm = tuple(float(v) for v in self.inplane_spacing_mm)

    @property
    def num_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def slice_shape(self) -> tuple[int, int]:
        return self.voxels.shape[1:]

    def with_voxels(self, voxels, **changes) -> "MRVolume":
        return replace(self, voxels=voxels, **changes)


@dataclass
class SliceWindow:
    slices: np.ndarray            # m x H x W
    center_index: int
    source_volume_id: str = ""
    indices: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        if self.slices.ndim != 3:
            raise ValueError("a window is an m x H x W stack")

    @property
    def m(self) -> int:
        return self.slices.shape[0]


@dataclass(frozen=True)
class TargetGrid:
    source_thickness_mm: float
    target_thickness_mm: float
    source_slices: int
    positions: tuple[tuple[int, float], ...]     # (n, delta) per target slice k

    @property
    def slice_count(self) -> int:
        return len(self.positions)


def _as_fraction(x: float) -> Fraction:
    return Fraction(x).limit_denominator(10 ** 6)


def source_index(k: int, h0: float, h1: float) -> tuple[int, float]:
    """Source slice ``n = floor(k*h1/h0)`` and offset ``delta = k*h1/h0 - n``."""
    if k < 0:
        raise ValueError(f"target index must be >= 0, got {k}")
    if not (h0 > 0 and h1 > 0):
        raise ValueError(f"thicknesses must be positive, got h0={h0}, h1={h1}")
    pos = k * _as_fraction(h1) / _as_fraction(h0)
    n = math.floor(pos)
    return n, float(pos - n)


def target_slice_count(num_source: int, h0: float, h1: float) -> int:
    """Largest K such that every target position lies inside the source extent."""
    return math.floor((num_source - 1) * _as_fraction(h0) / _as_fraction(h1)) + 1


def target_grid(num_source: int, h0: float, h1: float) -> TargetGrid:
    K = target_slice_count(num_source, h0, h1)
    return TargetGrid(source_thickness_mm=h0, target_thickness_mm=h1, source_slices=num_source,
                      positions=tuple(source_index(k, h0, h1) for k in range(K)))


def window_indices(n: int, num_slices: int, m: int = DEFAULT_WINDOW) -> list[int]:
    """Indices ``n-(m/2-1) .. n+m/2`` clamped to the volume."""
    if m < 2 or m % 2:
        raise ValueError(f"window length must be even, got {m}")
    if not 0 <= n < num_slices:
        raise IndexError(f"slice {n} outside volume of {num_slices} slices")
    return [min(max(i, 0), num_slices - 1) for i in range(n - (m // 2 - 1), n + m // 2 + 1)]


def extract_window(vol: MRVolume, n: int, m: int = DEFAULT_WINDOW) -> SliceWindow:
    idx = window_indices(n, vol.num_slices, m)
    return SliceWindow(slices=vol.voxels[idx], center_index=n,
                       source_volume_id=vol.volume_id, indices=tuple(idx))


def replicate_window(slice2d, m: int = DEFAULT_WINDOW) -> SliceWindow:
    """One-to-one mode: the same slice repeated ``m`` times."""
    if m < 1:
        raise ValueError("m must be >= 1")
    slice2d = np.asarray(slice2d, dtype=np.float32)
    return SliceWindow(slices=np.repeat(slice2d[None], m, axis=0), center_index=0,
                       indices=(0,) * m)


def normalize(vol: MRVolume, lo_pct: float = 0.5, hi_pct: float = 99.5) -> MRVolume:
    """Map the ``[lo_pct, hi_pct]`` percentile range onto ``[-1, 1]`` and clip."""
    if not 0 <= lo_pct < hi_pct <= 100:
        raise ValueError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    v = vol.voxels.astype(np.float64)
    lo, hi = np.percentile(v, [lo_pct, hi_pct])
    if hi <= lo:
        logger.warning("volume %r is constant; mapping to -1", vol.volume_id)
        return vol.with_voxels(np.full_like(vol.voxels, -1.0))
    out = np.clip(2 * (v - lo) / (hi - lo) - 1, -1, 1)
    return vol.with_voxels(out.astype(np.float32))


def is_normalized(vol: MRVolume) -> bool:
    return float(vol.voxels.min()) >= -1 and float(vol.voxels.max()) <= 1


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _is_nifti(path) -> bool:
    name = str(path).lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def read_volume(path, modality: str | None = None) -> MRVolume:
    """Read a NIfTI file or a ``.npy`` array with a JSON sidecar.

    NIfTI data is stored ``X x Y x Z``; slices are taken along the last axis.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if _is_nifti(path):
        import nibabel as nib

        img = nib.load(str(path))
        data = np.asarray(img.get_fdata(), dtype=np.float32)
        if data.ndim == 4 and data.shape[-1] == 1:
            data = data[..., 0]
        if data.ndim != 3:
            raise ValueError(f"{path}: expected a 3D image, got shape {data.shape}")
        zooms = [float(z) for z in img.header.get_zooms()[:3]]
        descrip = img.header["descrip"].tobytes().split(b"\0")[0].decode("ascii", "ignore")
        if modality is None and descrip.startswith("modality="):
            modality = descrip.split("=", 1)[1]
        return MRVolume(voxels=np.moveaxis(data, 2, 0), modality=modality or "",
                        thickness_mm=zooms[2], inplane_spacing_mm=(zooms[0], zooms[1]),
                        volume_id=path.name)
    if path.suffix == ".npy":
        voxels = np.load(path)
        meta = {}
        side = sidecar_path(path)
        if side.exists():
            meta = json.loads(side.read_text())
        return MRVolume(voxels=voxels, modality=modality or meta.get("modality", ""),
                        thickness_mm=meta.get("thickness_mm", 1.0),
                        inplane_spacing_mm=tuple(meta.get("inplane_spacing_mm", (1.0, 1.0))),
                        volume_id=path.name)
    raise ValueError(f"unsupported volume format: {path}")


def write_volume(vol: MRVolume, path) -> Path:
    path = Path(path)
    os.makedirs(path.parent or ".", exist_ok=True)
    if _is_nifti(path):
        import nibabel as nib

        affine = np.diag([*vol.inplane_spacing_mm, vol.thickness_mm, 1.0])
        img = nib.Nifti1Image(np.moveaxis(vol.voxels, 0, 2), affine)
        img.header.set_zooms((*vol.inplane_spacing_mm, vol.thickness_mm))
        img.header["descrip"] = f"modality={vol.modality}".encode("ascii")[:79]
        nib.save(img, str(path))
        return path
    if path.suffix == ".npy":
        np.save(path, vol.voxels)
        sidecar_path(path).write_text(json.dumps({
            "modality": vol.modality,
            "thickness_mm": vol.thickness_mm,
            "inplane_spacing_mm": list(vol.inplane_spacing_mm),
        }, indent=2))
        return path
    raise ValueError(f"unsupported volume format: {path}")
