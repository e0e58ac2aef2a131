"""Adversarial training loop with EMA, schedules and resumable checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ExperimentConfig
from .data import DatasetSpec, TrainingSampler, collate, make_phantom_corpus, read_manifest
from .discriminator import Discriminator
from .features import build_extractor
from .generator import Generator
from .losses import (adv_d_loss, adv_g_loss, blur_sigma, gaussian_blur, pixel_l1, r1_grad_norm_sq,
                     sam_loss, total_g_loss)

logger = logging.getLogger(__name__)

# Named random streams; each is an independent numpy Generator seeded by (seed, id).
STREAMS = {"init": 0, "data": 1, "latent": 2, "probe": 3}


class NonFiniteLossError(RuntimeError):
    pass


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


def lr_at(step: int, total_steps: int, lr0: float, decay_start: float = 0.5) -> float:
    """Constant ``lr0`` until ``decay_start * total_steps``, then linear to 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    start = decay_start * total_steps
    if step < start:
        return lr0
    return lr0 * (total_steps - step) / (total_steps - start)


def ema_beta(images_seen: int, beta: float = 0.999, rampup_images: int = 10_000) -> float:
    if rampup_images <= 0:
        return beta
    return beta * min(1.0, images_seen / rampup_images)


@torch.no_grad()
def ema_update(ema: torch.nn.Module, live: torch.nn.Module, images_seen: int,
               beta: float = 0.999, rampup_images: int = 10_000) -> torch.nn.Module:
    """``ema <- b * ema + (1 - b) * live`` with ``b`` ramped up over ``rampup_images``."""
    ep, lp = dict(ema.named_parameters()), dict(live.named_parameters())
    if ep.keys() != lp.keys():
        raise ValueError("EMA and live models have different parameter sets")
    b = ema_beta(images_seen, beta, rampup_images)
    for name, p in ep.items():
        q = lp[name]
        if p.shape != q.shape:
            raise ValueError(f"parameter {name}: shape {tuple(p.shape)} vs {tuple(q.shape)}")
        p.copy_(q.detach().lerp(p, b))
    for (name, b_ema), (_, b_live) in zip(ema.named_buffers(), live.named_buffers()):
        b_ema.copy_(b_live)
    return ema


def build_dataset(cfg: ExperimentConfig) -> DatasetSpec:
    d = cfg.data
    if d.manifest:
        return read_manifest(d.manifest)
    return make_phantom_corpus(d.phantom_subjects, d.phantom_size, seed=d.phantom_seed,
                               modalities=cfg.model.modalities, n_slices=d.phantom_slices,
                               dsf_choices=d.dsf_choices)


def _module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _load_module(prefix: str, module: torch.nn.Module, tensors: dict):
    sd = {k[len(prefix) + 1:]: torch.from_numpy(v.copy()) for k, v in tensors.items()
          if k.startswith(prefix + "/")}
    module.load_state_dict(sd)


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{prefix}/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    return tensors, sd["param_groups"]


def _load_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict, groups: list):
    state: dict = {}
    for k, v in tensors.items():
        if k.startswith(prefix + "/"):
            idx, key = k[len(prefix) + 1:].split("/", 1)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(v.copy())
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": state, "param_groups": groups})


@dataclass
class StepRecord:
    step: int
    images_seen: int
    loss_g: float
    loss_d: float
    r1: float
    sigma: float
    lr_g: float
    lr_d: float
    pix: float
    sam: float

    def to_dict(self):
        return dict(self.__dict__)


class Trainer:
    """Owns the generator, discriminator, EMA copy, optimizers and random streams."""

    def __init__(self, cfg: ExperimentConfig, dataset: DatasetSpec | None = None, out_dir=None):
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else build_dataset(cfg)
        missing = set(self.dataset.modalities) - set(cfg.model.modalities)
        if missing:
            raise ValueError(f"dataset modalities {sorted(missing)} absent from the model config")
        self.out_dir = Path(out_dir or cfg.train.out_dir)
        seed = cfg.train.seed
        torch.manual_seed(int(stream(seed, "init").integers(2**62)))
        self.G = Generator(cfg.model)
        self.D = Discriminator(cfg.model)
        self.G_ema = copy.deepcopy(self.G).requires_grad_(False).eval()
        self.extractor = build_extractor(cfg.sam.backend, cfg.sam.checkpoint, cfg.sam.model_type,
                                         cfg.sam.stub_seed, cfg.sam.stub_channels)
        t = cfg.train
        self.opt_g = torch.optim.Adam(self.G.parameters(), lr=t.lr_g, betas=t.betas, eps=1e-8)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=t.lr_d, betas=t.betas, eps=1e-8)
        self.sampler = TrainingSampler(self.dataset, stream(seed, "data"), task=cfg.data.task,
                                       dsf_choices=cfg.data.dsf_choices, m=cfg.model.window,
                                       split=cfg.data.split)
        self.latent_rng = stream(seed, "latent")
        self.step = 0
        self.images_seen = 0
        self.total_steps = self._total_steps()
        self.history: list[dict] = []
        self._probe = None

    # -- bookkeeping -------------------------------------------------------
    def _total_steps(self) -> int:
        t = self.cfg.train
        if t.total_steps:
            return int(t.total_steps)
        slices = sum(r.load(self.dataset.modalities[0]).num_slices
                     for r in self.dataset.split(self.cfg.data.split))
        return max(1, t.epochs * math.ceil(slices / t.batch_size))

    def _tensors(self, batch: dict) -> dict:
        return {k: torch.from_numpy(v) for k, v in batch.items()}

    def probe_batch(self) -> dict:
        """Fixed held-in batch with fixed latents, drawn once from its own stream."""
        if self._probe is None:
            rng = stream(self.cfg.train.seed, "probe")
            sampler = TrainingSampler(self.dataset, rng, task=self.cfg.data.task,
                                      dsf_choices=self.cfg.data.dsf_choices, m=self.cfg.model.window,
                                      split=self.cfg.data.split)
            b = self._tensors(collate(sampler.batch(self.cfg.train.probe_size), self.cfg.model.modalities))
            b["latent"] = torch.from_numpy(rng.standard_normal((self.cfg.train.probe_size,
                                                                self.cfg.model.z_dim)).astype(np.float32))
            self._probe = b
        return self._probe

    @torch.no_grad()
    def probe_l1(self, ema: bool = False) -> float:
        G = self.G_ema if ema else self.G
        b = self.probe_batch()
        pred = G(b["x_in"], b["latent"], b["c1"], b["delta"])
        return float(pixel_l1(pred, b["target"]))

    @torch.no_grad()
    def probe_psnr(self, ema: bool = True) -> float:
        G = self.G_ema if ema else self.G
        b = self.probe_batch()
        pred = G(b["x_in"], b["latent"], b["c1"], b["delta"])
        mse = float((pred - b["target"]).square().mean())
        return 100.0 if mse == 0 else min(100.0, 10 * math.log10(4.0 / mse))

    # -- one iteration -----------------------------------------------------
    def _dump_batch(self, batch: dict, latent: np.ndarray, losses: dict) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"nonfinite_step{self.step:07d}.npz"
        np.savez(path, latent=latent, **batch)
        (self.out_dir / f"nonfinite_step{self.step:07d}.json").write_text(json.dumps(losses))
        return path

    def train_step(self) -> StepRecord:
        cfg, lc = self.cfg, self.cfg.loss
        B = cfg.train.batch_size
        batch_np = collate(self.sampler.batch(B), cfg.model.modalities)
        latent_np = self.latent_rng.standard_normal((B, cfg.model.z_dim)).astype(np.float32)
        b = self._tensors(batch_np)
        latent = torch.from_numpy(latent_np)
        sigma = blur_sigma(self.images_seen, lc)
        lr_g = lr_at(self.step, self.total_steps, cfg.train.lr_g, cfg.train.decay_start)
        lr_d = lr_at(self.step, self.total_steps, cfg.train.lr_d, cfg.train.decay_start)
        for g in self.opt_g.param_groups:
            g["lr"] = lr_g
        for g in self.opt_d.param_groups:
            g["lr"] = lr_d

        target = gaussian_blur(b["target"], sigma)
        with torch.no_grad():
            v = self.G.map_encoder_attributes(b["c1"], b["delta"])

        # Discriminator step with R1 on the real (window, slice) pair.
        self.D.requires_grad_(True)
        with torch.no_grad():
            fake = gaussian_blur(self.G(b["x_in"], latent, b["c1"], b["delta"]), sigma)
        win_r = b["x_in"].clone().requires_grad_(lc.gamma_g > 0)
        tgt_r = target.clone().requires_grad_(lc.gamma_g > 0)
        logits_real = self.D(win_r, tgt_r, v)
        logits_fake = self.D(b["x_in"], fake, v)
        r1 = r1_grad_norm_sq(logits_real, [win_r, tgt_r]) if lc.gamma_g > 0 else torch.zeros(())
        loss_d = adv_d_loss(logits_real, logits_fake, r1, lc.gamma_g)
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()

        # Generator step.
        self.D.requires_grad_(False)
        fake = gaussian_blur(self.G(b["x_in"], latent, b["c1"], b["delta"]), sigma)
        adv = adv_g_loss(self.D(b["x_in"], fake, v))
        pix = pixel_l1(fake, target)
        sam = sam_loss(fake, target, self.extractor) if lc.lambda2 > 0 else torch.zeros(())
        loss_g = total_g_loss(adv, pix, sam, lc)
        losses = {"loss_g": loss_g.item(), "loss_d": loss_d.item()}
        if not all(math.isfinite(x) for x in losses.values()):
            path = self._dump_batch(batch_np, latent_np, losses)
            raise NonFiniteLossError(f"non-finite loss at step {self.step}: {losses}; batch dumped to {path}")
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()

        self.images_seen += B
        ema_update(self.G_ema, self.G, self.images_seen, cfg.train.ema_beta, cfg.train.ema_rampup_images)
        rec = StepRecord(step=self.step, images_seen=self.images_seen, loss_g=losses["loss_g"],
                         loss_d=losses["loss_d"], r1=r1.mean().item(), sigma=sigma, lr_g=lr_g, lr_d=lr_d,
                         pix=pix.item(), sam=sam.item())
        self.step += 1
        return rec

    # -- driver ------------------------------------------------------------
    def fit(self, steps: int | None = None, log_file=None) -> list[dict]:
        """Run ``steps`` iterations (default: up to ``total_steps``), logging JSON records."""
        t = self.cfg.train
        end = min(self.total_steps, self.step + steps) if steps is not None else self.total_steps
        log_path = Path(log_file) if log_file else self.out_dir / "log.jsonl"
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "a") as fh:
            while self.step < end:
                rec = self.train_step().to_dict()
                if rec["step"] % t.log_every == 0 or self.step == end:
                    rec["probe_psnr"] = self.probe_psnr()
                    line = json.dumps(rec)
                    fh.write(line + "\n")
                    fh.flush()
                    logger.info(line)
                    self.history.append(rec)
                if t.checkpoint_every and self.step % t.checkpoint_every == 0:
                    self.save(self.out_dir / f"ckpt_{self.step:07d}.zip")
        return self.history

    # -- persistence -------------------------------------------------------
    def state(self) -> tuple[dict, dict]:
        tensors = {}
        tensors.update(_module_tensors("G", self.G))
        tensors.update(_module_tensors("D", self.D))
        tensors.update(_module_tensors("G_ema", self.G_ema))
        og, groups_g = _optimizer_tensors("opt_g", self.opt_g)
        od, groups_d = _optimizer_tensors("opt_d", self.opt_d)
        tensors.update(og)
        tensors.update(od)
        meta = {
            "config": self.cfg.to_dict(),
            "step": self.step,
            "images_seen": self.images_seen,
            "total_steps": self.total_steps,
            "sampler_images_seen": self.sampler.images_seen,
            "rng": {"data": self.sampler.rng.bit_generator.state,
                    "latent": self.latent_rng.bit_generator.state},
            "opt_g_groups": groups_g,
            "opt_d_groups": groups_d,
        }
        return meta, tensors

    def save(self, path) -> Path:
        meta, tensors = self.state()
        return ckpt.save_archive(path, meta, tensors)

    def load_state(self, meta: dict, tensors: dict):
        _load_module("G", self.G, tensors)
        _load_module("D", self.D, tensors)
        _load_module("G_ema", self.G_ema, tensors)
        _load_optimizer("opt_g", self.opt_g, tensors, meta["opt_g_groups"])
        _load_optimizer("opt_d", self.opt_d, tensors, meta["opt_d_groups"])
        self.step = meta["step"]
        self.images_seen = meta["images_seen"]
        self.total_steps = meta["total_steps"]
        self.sampler.images_seen = meta["sampler_images_seen"]
        self.sampler.rng.bit_generator.state = meta["rng"]["data"]
        self.latent_rng.bit_generator.state = meta["rng"]["latent"]

    @classmethod
    def resume(cls, path, dataset: DatasetSpec | None = None, out_dir=None) -> "Trainer":
        meta, tensors = ckpt.load_archive(path)
        cfg = ExperimentConfig.from_dict(meta["config"])
        trainer = cls(cfg, dataset, out_dir)
        trainer.load_state(meta, tensors)
        return trainer


def train(cfg: ExperimentConfig, dataset: DatasetSpec | None = None, out_dir=None,
          resume=None) -> Path:
    """Train to completion and return the final checkpoint path."""
    trainer = Trainer.resume(resume, dataset, out_dir) if resume else Trainer(cfg, dataset, out_dir)
    trainer.fit()
    return trainer.save(trainer.out_dir / "final.zip")


def load_generator(path, ema: bool = True) -> Generator:
    """Rebuild the (EMA) generator from a checkpoint archive."""
    meta, tensors = ckpt.load_archive(path)
    cfg = ExperimentConfig.from_dict(meta["config"])
    G = Generator(cfg.model)
    _load_module("G_ema" if ema else "G", G, tensors)
    return G.eval().requires_grad_(False)
