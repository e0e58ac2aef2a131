"""Thick-slice simulation, datasets and arbitrary-task training-pair sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import MRVolume, extract_window, read_volume, source_index, write_volume

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
TASKS = ("cms", "sr", "cmsr", "arbitrary")


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Degradation
# ---------------------------------------------------------------------------

def slice_profile(dsf: int) -> np.ndarray:
    """Normalized Gaussian through-plane kernel with FWHM of ``dsf`` slices."""
    sigma = dsf * FWHM_TO_SIGMA
    radius = max(1, math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def simulate_thick_slices(vol: MRVolume, dsf: int) -> MRVolume:
    """Blur along the slice axis with a Gaussian slice profile, keep every ``dsf``-th slice.

    The profile's FWHM equals the simulated thickness ``dsf * h0``; borders
    replicate the edge slice; decimation starts at slice 0.
    """
    dsf = int(dsf)
    if dsf < 1:
        raise ValueError(f"dsf must be >= 1, got {dsf}")
    if dsf > vol.num_slices:
        raise ValueError(f"dsf={dsf} exceeds the {vol.num_slices} available slices")
    k = slice_profile(dsf)
    blurred = ndimage.correlate1d(vol.voxels.astype(np.float64), k, axis=0, mode="nearest")
    return vol.with_voxels(blurred[::dsf].astype(np.float32), thickness_mm=vol.thickness_mm * dsf)


# ---------------------------------------------------------------------------
# Dataset description
# ---------------------------------------------------------------------------

@dataclass
class SubjectRecord:
    subject: str
    volumes: dict            # modality -> path or MRVolume
    split: str = "train"
    mask: object = None      # path, array or None

    def load(self, modality: str) -> MRVolume:
        v = self.volumes[modality]
        if isinstance(v, MRVolume):
            return v
        vol = read_volume(v, modality=modality)
        self.volumes[modality] = vol
        return vol

    def load_mask(self):
        if self.mask is None or isinstance(self.mask, np.ndarray):
            return self.mask
        self.mask = read_volume(self.mask).voxels > 0.5
        return self.mask


@dataclass
class DatasetSpec:
    records: list[SubjectRecord]
    modalities: tuple[str, ...]
    dsf_choices: tuple[int, ...] = (2, 4, 6)

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        seen = {}
        for r in self.records:
            if seen.setdefault(r.subject, r.split) != r.split:
                raise DatasetError(f"subject {r.subject!r} appears in splits {seen[r.subject]!r} and {r.split!r}")

    def split(self, name: str) -> list[SubjectRecord]:
        return [r for r in self.records if r.split == name]

    def subjects(self, name: str | None = None) -> list[str]:
        return [r.subject for r in self.records if name is None or r.split == name]

    def check_alignment(self):
        for r in self.records:
            shapes = {m: r.load(m).voxels.shape for m in r.volumes}
            if len(set(shapes.values())) > 1:
                raise DatasetError(f"subject {r.subject!r}: modalities not aligned {shapes}")


def read_manifest(path) -> DatasetSpec:
    """Load a JSON manifest; volume paths are relative to the manifest's folder."""
    path = Path(path)
    data = json.loads(path.read_text())
    root = path.parent
    records = []
    for rec in data["records"]:
        vols = {m: str(root / p) for m, p in rec["volumes"].items()}
        mask = rec.get("mask")
        records.append(SubjectRecord(subject=rec["subject"], volumes=vols, split=rec.get("split", "train"),
                                     mask=str(root / mask) if mask else None))
    return DatasetSpec(records=records, modalities=tuple(data["modalities"]),
                       dsf_choices=tuple(data.get("dsf_choices", (2, 4, 6))))


def write_manifest(spec: DatasetSpec, directory, fmt: str = ".npy") -> Path:
    """Write every in-memory volume under ``directory`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for r in spec.records:
        vols = {}
        for m in r.volumes:
            name = f"{r.subject}_{m}{fmt}"
            write_volume(r.load(m), directory / name)
            vols[m] = name
        entry = {"subject": r.subject, "split": r.split, "volumes": vols}
        mask = r.load_mask()
        if mask is not None:
            name = f"{r.subject}_mask{fmt}"
            write_volume(MRVolume(mask.astype(np.float32), "mask"), directory / name)
            entry["mask"] = name
        out.append(entry)
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"modalities": list(spec.modalities),
                                    "dsf_choices": list(spec.dsf_choices),
                                    "records": out}, indent=2))
    return manifest


# ---------------------------------------------------------------------------
# Phantom corpus
# ---------------------------------------------------------------------------

# Tissue labels: background, scalp, CSF, grey matter, white matter, lesion.
TISSUE_INTENSITY = {
    "T1":    (0.0, 0.80, 0.15, 0.50, 0.75, 0.30),
    "T2":    (0.0, 0.40, 0.95, 0.60, 0.40, 0.85),
    "FLAIR": (0.0, 0.50, 0.10, 0.60, 0.45, 0.95),
    "PD":    (0.0, 0.60, 0.80, 0.70, 0.60, 0.75),
}


def _phantom_labels(rng: np.random.Generator, n_slices: int, size: int) -> np.ndarray:
    z, y, x = np.meshgrid(np.linspace(-1, 1, n_slices), np.linspace(-1, 1, size),
                          np.linspace(-1, 1, size), indexing="ij")
    cz, cy, cx = rng.uniform(-0.05, 0.05, 3)
    az, ay, ax = rng.uniform(0.8, 0.95), rng.uniform(0.72, 0.85), rng.uniform(0.62, 0.75)
    rot = rng.uniform(-0.3, 0.3)
    yr = (y - cy) * np.cos(rot) - (x - cx) * np.sin(rot)
    xr = (y - cy) * np.sin(rot) + (x - cx) * np.cos(rot)
    zr = z - cz
    rho = np.sqrt((zr / az) ** 2 + (yr / ay) ** 2 + (xr / ax) ** 2)
    theta = np.arctan2(yr, xr)
    phi = np.arctan2(np.hypot(yr, xr), zr)

    # Gyral folding: angular harmonics ripple the tissue boundaries.
    k1, k2 = rng.integers(5, 9), rng.integers(2, 5)
    p1, p2 = rng.uniform(0, 2 * np.pi, 2)
    fold = 1 + 0.07 * np.sin(k1 * theta + p1) * np.sin(k2 * phi + p2)
    wm_fold = 1 + 0.10 * np.sin((k1 + 2) * theta + p2) * np.cos(k2 * phi + p1)

    labels = np.zeros(rho.shape, dtype=np.int8)
    labels[rho < 1.0] = 1
    labels[rho * fold < 0.88] = 2
    labels[rho * fold < 0.82] = 3
    labels[rho * wm_fold < 0.58] = 4
    for sign in (-1, 1):   # ventricles
        vc = np.array([0.0, rng.uniform(-0.05, 0.05), sign * rng.uniform(0.08, 0.14)])
        vr = np.array([rng.uniform(0.25, 0.4), rng.uniform(0.18, 0.28), rng.uniform(0.05, 0.09)])
        d = ((zr - vc[0]) / vr[0]) ** 2 + ((yr - vc[1]) / vr[1]) ** 2 + ((xr - vc[2]) / vr[2]) ** 2
        labels[d < 1] = 2
    if rng.random() < 0.75:   # lesion
        lc = rng.uniform(-0.3, 0.3, 3)
        lr = rng.uniform(0.1, 0.2)
        d = np.sqrt((zr - lc[0]) ** 2 + (yr - lc[1]) ** 2 + (xr - lc[2]) ** 2)
        labels[(d < lr) & (labels >= 3)] = 5
    return labels


def make_phantom_corpus(n_subjects: int = 16, size: int = 64, seed: int = 0,
                        modalities=("T1", "T2", "FLAIR"), n_slices: int | None = None,
                        val_fraction: float = 0.0, test_fraction: float = 0.0,
                        thickness_mm: float = 1.0, dsf_choices=(2, 4, 6)) -> DatasetSpec:
    """Procedural head phantoms with spatially aligned pseudo-modalities.

    All modalities of a subject share one label volume; each modality maps
    the labels through its own intensity table, followed by partial-volume
    smoothing and a faint per-modality texture.  Volumes are in ``[-1, 1]``.
    """
    if size < 32:
        raise ValueError("phantom size must be >= 32")
    unknown = set(modalities) - set(TISSUE_INTENSITY)
    if unknown:
        raise ValueError(f"no intensity table for {sorted(unknown)}")
    n_slices = n_slices or size
    ss = np.random.SeedSequence(seed)
    n_test = int(round(test_fraction * n_subjects))
    n_val = int(round(val_fraction * n_subjects))
    records = []
    for i, child in enumerate(ss.spawn(n_subjects)):
        rng = np.random.default_rng(child)
        labels = _phantom_labels(rng, n_slices, size)
        vols = {}
        for m in modalities:
            table = np.asarray(TISSUE_INTENSITY[m])
            img = table[labels]
            img = ndimage.gaussian_filter(img, 0.6)
            texture = ndimage.gaussian_filter(rng.standard_normal(img.shape), 2.0)
            img = img + 0.02 * texture * (labels > 0)
            img = np.clip(2 * img - 1, -1, 1)
            vols[m] = MRVolume(img.astype(np.float32), m, thickness_mm=thickness_mm,
                               volume_id=f"phantom{i:03d}_{m}")
        split = "test" if i >= n_subjects - n_test else "val" if i >= n_subjects - n_test - n_val else "train"
        records.append(SubjectRecord(subject=f"phantom{i:03d}", volumes=vols, split=split,
                                     mask=labels == 5))
    return DatasetSpec(records=records, modalities=tuple(modalities), dsf_choices=tuple(dsf_choices))


# ---------------------------------------------------------------------------
# Training pairs
# ---------------------------------------------------------------------------

@dataclass
class TrainingItem:
    x_in: np.ndarray          # m x H x W window from the (degraded) source
    source_modality: str
    target_modality: str
    delta: float
    target: np.ndarray        # H x W ground-truth slice
    dsf: int
    k: int
    n: int
    subject: str
    images_seen: int = 0


@dataclass
class _Cache:
    degraded: dict = field(default_factory=dict)

    def get(self, rec: SubjectRecord, modality: str, dsf: int) -> MRVolume:
        key = (rec.subject, modality, dsf)
        if key not in self.degraded:
            vol = rec.load(modality)
            self.degraded[key] = vol if dsf == 1 else simulate_thick_slices(vol, dsf)
        return self.degraded[key]


_DEFAULT_CACHE = _Cache()


def _pick_pair(rng, modalities, task):
    c0 = modalities[rng.integers(len(modalities))]
    if task == "sr":
        return c0, c0
    if task in ("cms", "cmsr") and len(modalities) > 1:
        others = [m for m in modalities if m != c0]
        return c0, others[rng.integers(len(others))]
    return c0, modalities[rng.integers(len(modalities))]


def sample_training_item(spec: DatasetSpec, rng: np.random.Generator, task: str = "arbitrary",
                         dsf_choices=None, m: int = 4, split: str = "train", images_seen: int = 0,
                         cache: _Cache | None = None) -> TrainingItem:
    """Draw subject, modality pair, DSF and target position uniformly.

    CMS fixes DSF at 1 (no degradation, delta = 0); SR forces the target
    modality to equal the source.  The target position ``k`` is uniform over
    the high-resolution positions inside the degraded volume's extent.
    """
    if task not in TASKS:
        raise DatasetError(f"unknown task {task!r}")
    cache = cache or _DEFAULT_CACHE
    records = [r for r in spec.split(split) if len([mm for mm in spec.modalities if mm in r.volumes]) >= 1]
    if not records:
        raise DatasetError(f"no records in split {split!r}")
    rec = records[rng.integers(len(records))]
    mods = [mm for mm in spec.modalities if mm in rec.volumes]
    if task in ("cms", "cmsr") and len(mods) < 2:
        raise DatasetError(f"subject {rec.subject!r} has no modality pair for task {task!r}")
    c0, c1 = _pick_pair(rng, mods, task)
    choices = tuple(dsf_choices or spec.dsf_choices)
    dsf = 1 if task == "cms" else int(choices[rng.integers(len(choices))])

    hr_target = rec.load(c1)
    lr_source = cache.get(rec, c0, dsf)
    K = (lr_source.num_slices - 1) * dsf + 1
    k = int(rng.integers(K))
    n, delta = source_index(k, float(dsf), 1.0)
    window = extract_window(lr_source, n, m)
    return TrainingItem(x_in=window.slices, source_modality=c0, target_modality=c1, delta=delta,
                        target=hr_target.voxels[k], dsf=dsf, k=k, n=n, subject=rec.subject,
                        images_seen=images_seen + 1)


class TrainingSampler:
    """Stateful batch sampler over one split with its own random stream."""

    def __init__(self, spec: DatasetSpec, rng: np.random.Generator, task: str = "arbitrary",
                 dsf_choices=None, m: int = 4, split: str = "train"):
        self.spec = spec
        self.rng = rng
        self.task = task
        self.dsf_choices = dsf_choices
        self.m = m
        self.split = split
        self.images_seen = 0
        self.cache = _Cache()

    def sample(self) -> TrainingItem:
        item = sample_training_item(self.spec, self.rng, self.task, self.dsf_choices, self.m,
                                    self.split, self.images_seen, self.cache)
        self.images_seen = item.images_seen
        return item

    def batch(self, size: int) -> list[TrainingItem]:
        return [self.sample() for _ in range(size)]


def collate(items: list[TrainingItem], modalities) -> dict:
    """Stack items into float32/int64 numpy arrays keyed for the training loop."""
    index = {m: i for i, m in enumerate(modalities)}
    return {
        "x_in": np.stack([it.x_in for it in items]).astype(np.float32),
        "target": np.stack([it.target for it in items])[:, None].astype(np.float32),
        "c0": np.array([index[it.source_modality] for it in items], dtype=np.int64),
        "c1": np.array([index[it.target_modality] for it in items], dtype=np.int64),
        "delta": np.array([it.delta for it in items], dtype=np.float32),
    }
