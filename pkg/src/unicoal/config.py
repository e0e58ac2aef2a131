"""Experiment configuration: model, loss, train, data and feature-extractor sections."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelConfig:
    resolution: int = 256
    num_layers: int = 14
    window: int = 4
    modalities: tuple[str, ...] = ("T1", "T2", "FLAIR", "PD")
    z_dim: int = 512
    w_dim: int = 512           # style width; also the width of the encoder attribute v
    e_dim: int = 512
    embed_dim: int = 512
    delta_freqs: int = 8
    mapping_layers: int = 2
    mapping_lr_multiplier: float = 0.01
    channel_base: int = 32768
    channel_max: int = 512
    margin: int = 10
    image_rep: str = "mean"    # "mean" (shift-invariant) or "flatten"
    d_channel_base: int = 16384
    d_channel_max: int = 512
    d_blocks: int = 7
    d_feature_dim: int = 512
    mbstd_group: int = 4

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if self.image_rep not in ("mean", "flatten"):
            raise ValueError(f"image_rep must be 'mean' or 'flatten', got {self.image_rep!r}")


@dataclass
class LossConfig:
    lambda1: float = 10.0
    lambda2: float = 1.0
    gamma_g: float = 1.0
    blur_images: int = 100_000
    blur_sigma0: float = 2.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "gamma_g", "blur_sigma0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.blur_images < 0:
            raise ValueError("blur_images must be >= 0")


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 100
    total_steps: int | None = None      # overrides epochs when set
    lr_g: float = 0.0025
    lr_d: float = 0.0020
    betas: tuple[float, float] = (0.0, 0.99)
    decay_start: float = 0.5            # fraction of training at which lr decay begins
    ema_beta: float = 0.999
    ema_rampup_images: int = 10_000
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 500
    probe_size: int = 8
    out_dir: str = "runs/unicoal"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.decay_start <= 1:
            raise ValueError("decay_start must lie in [0, 1]")


@dataclass
class DataConfig:
    manifest: str | None = None
    task: str = "arbitrary"             # cms | sr | cmsr | arbitrary
    dsf_choices: tuple[int, ...] = (2, 4, 6)
    phantom_subjects: int = 16
    phantom_size: int = 32
    phantom_slices: int | None = None
    phantom_seed: int = 0
    split: str = "train"

    def __post_init__(self):
        self.dsf_choices = tuple(int(d) for d in self.dsf_choices)
        if self.task not in ("cms", "sr", "cmsr", "arbitrary"):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class SamConfig:
    backend: str = "stub"               # stub | identity | sam
    checkpoint: str | None = None
    model_type: str = "vit_b"
    stub_seed: int = 0
    stub_channels: int = 16


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sam: SamConfig = field(default_factory=SamConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, sub in ((f.name, f.default_factory) for f in dataclasses.fields(cls)):
            sub_cls = type(sub())
            values = d.get(name, {})
            known = {f.name for f in dataclasses.fields(sub_cls)}
            bad = set(values) - known
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = sub_cls(**values)
        return cls(**kwargs)


def desk_model_config(resolution: int = 32, **overrides) -> ModelConfig:
    """Small widths for single-workstation runs."""
    cfg = dict(resolution=resolution, modalities=("T1", "T2", "FLAIR"), z_dim=128, w_dim=128,
               e_dim=512, embed_dim=128, channel_base=512, channel_max=32,
               d_channel_base=256, d_channel_max=64, d_feature_dim=128)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    return ExperimentConfig.from_dict(data)
