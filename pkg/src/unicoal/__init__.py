"""Arbitrary-modality, arbitrary-thickness MRI slice synthesis with an alias-free co-modulated GAN."""

from .aliasfree import LayerSchedule, build_schedule, design_lowpass, resample2d, wrapped_nonlinearity
from .config import DataConfig, ExperimentConfig, LossConfig, ModelConfig, TrainConfig, desk_model_config, load_config
from .data import DatasetSpec, make_phantom_corpus, sample_training_item, simulate_thick_slices
from .discriminator import Discriminator
from .generator import AttributeCondition, Generator, StyleState
from .inference import ReconstructionRequest, reconstruct_volume
from .metrics import dsc, evaluate, psnr, ssim
from .train import Trainer, ema_update, lr_at, train
from .volume import MRVolume, SliceWindow, TargetGrid, extract_window, read_volume, source_index, write_volume

__version__ = "0.1.0"
