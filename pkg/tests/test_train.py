import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from unicoal import checkpoint as ckpt
from unicoal.config import DataConfig, ExperimentConfig, LossConfig, TrainConfig, desk_model_config, load_config
from unicoal.train import NonFiniteLossError, Trainer, ema_beta, ema_update, load_generator, lr_at


def small_cfg(tmp_path, **train):
    t = dict(batch_size=2, total_steps=6, log_every=1, checkpoint_every=0, out_dir=str(tmp_path / "run"), probe_size=2)
    t.update(train)
    return ExperimentConfig(model=desk_model_config(32), loss=LossConfig(blur_images=100),
                            train=TrainConfig(**t),
                            data=DataConfig(phantom_subjects=2, phantom_size=32, phantom_slices=8))


# -- schedules ----------------------------------------------------------------

def test_lr_examples():
    assert lr_at(0, 1000, 0.0025) == 0.0025
    assert lr_at(750, 1000, 0.0025) == pytest.approx(0.00125)
    assert lr_at(1000, 1000, 0.0025) == 0
    with pytest.raises(ValueError):
        lr_at(1001, 1000, 0.1)


@given(st.integers(1, 5000), st.data())
def test_lr_non_increasing_and_continuous(total, data):
    a = data.draw(st.integers(0, total - 1))
    assert lr_at(a + 1, total, 1.0) <= lr_at(a, total, 1.0)
    # the largest single-step jump is one decay increment
    assert lr_at(a, total, 1.0) - lr_at(a + 1, total, 1.0) <= 1.0 / (total / 2) + 1e-12


def test_ema_beta_ramp():
    assert ema_beta(0) == 0
    assert ema_beta(5000) == pytest.approx(0.4995)
    assert ema_beta(10_000) == ema_beta(10 ** 9) == 0.999


def test_ema_fixed_point_and_convergence():
    live = torch.nn.Linear(3, 2)
    ema = torch.nn.Linear(3, 2)
    ema.load_state_dict(live.state_dict())
    ema_update(ema, live, 0)
    torch.testing.assert_close(ema.weight, live.weight)
    # constant live weights: ema - live shrinks by exactly beta each update
    with torch.no_grad():
        ema.weight.add_(1.0)
    gap0 = (ema.weight - live.weight).detach().clone()
    for _ in range(5):
        ema_update(ema, live, 20_000, beta=0.9)
    torch.testing.assert_close(ema.weight - live.weight, gap0 * 0.9 ** 5, atol=1e-6, rtol=1e-5)


def test_ema_rejects_mismatched_models():
    with pytest.raises(ValueError):
        ema_update(torch.nn.Linear(3, 2), torch.nn.Linear(3, 3), 0)


# -- checkpoints --------------------------------------------------------------

def test_archive_roundtrip_is_byte_identical(tmp_path):
    meta = {"b": 1, "a": [1, 2]}
    tensors = {"x/y": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array(3, dtype=np.int64)}
    p1 = ckpt.save_archive(tmp_path / "one.zip", meta, tensors)
    m, t = ckpt.load_archive(p1)
    p2 = ckpt.save_archive(tmp_path / "two.zip", m, t)
    assert p1.read_bytes() == p2.read_bytes()
    np.testing.assert_array_equal(t["x/y"], tensors["x/y"])


def test_archive_errors(tmp_path):
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_archive(tmp_path / "missing.zip")
    bad = tmp_path / "bad.zip"
    bad.write_bytes(b"not a zip")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_archive(bad)


# -- training -----------------------------------------------------------------

def test_dry_run_writes_loadable_checkpoint(tmp_path):
    tr = Trainer(small_cfg(tmp_path, total_steps=2))
    tr.fit()
    path = tr.save(tmp_path / "ck.zip")
    G = load_generator(path)
    assert G.cfg == tr.cfg.model
    records = [json.loads(l) for l in (tmp_path / "run" / "log.jsonl").read_text().splitlines()]
    assert len(records) == 2
    assert {"step", "images_seen", "loss_g", "loss_d", "r1", "sigma", "lr_g", "lr_d"} <= set(records[0])
    assert records[1]["images_seen"] == 4


def test_checkpoint_save_load_save_identical(tmp_path):
    tr = Trainer(small_cfg(tmp_path))
    tr.fit(2)
    p1 = tr.save(tmp_path / "a.zip")
    tr2 = Trainer.resume(p1)
    p2 = tr2.save(tmp_path / "b.zip")
    assert p1.read_bytes() == p2.read_bytes()


def test_resume_reproduces_next_steps(tmp_path):
    cfg = small_cfg(tmp_path)
    a = Trainer(cfg)
    a.fit(2)
    path = a.save(tmp_path / "mid.zip")
    ref = [a.train_step().to_dict() for _ in range(2)]
    b = Trainer.resume(path)
    got = [b.train_step().to_dict() for _ in range(2)]
    assert got == ref


def test_ema_only_changes_through_update(tmp_path):
    tr = Trainer(small_cfg(tmp_path))
    before = {k: v.clone() for k, v in tr.G_ema.state_dict().items()}
    tr.probe_l1()
    tr.probe_psnr()
    for k, v in tr.G_ema.state_dict().items():
        assert torch.equal(v, before[k])


def test_non_finite_loss_aborts_with_dump(tmp_path):
    tr = Trainer(small_cfg(tmp_path))
    with torch.no_grad():
        next(tr.G.synthesizer.to_image.parameters()).fill_(float("nan"))
    with pytest.raises(NonFiniteLossError):
        tr.train_step()
    assert list((tmp_path / "run").glob("nonfinite_step*.npz"))


def test_blur_and_lr_follow_schedule_in_logs(tmp_path):
    tr = Trainer(small_cfg(tmp_path, total_steps=6))
    tr.fit()
    for rec in tr.history:
        seen_before = rec["images_seen"] - 2
        assert rec["sigma"] == pytest.approx(2.0 * max(0, 1 - seen_before / 100))
        assert rec["lr_g"] == pytest.approx(lr_at(rec["step"], 6, 0.0025))


def test_config_file_roundtrip(tmp_path):
    cfg = small_cfg(tmp_path)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p).to_dict() == cfg.to_dict()
    toml = tmp_path / "cfg.toml"
    toml.write_text('[train]\nbatch_size = 3\n[model]\nresolution = 32\n[sam]\nbackend = "identity"\n')
    c = load_config(toml)
    assert c.train.batch_size == 3 and c.sam.backend == "identity"
    toml.write_text("[bogus]\nx = 1\n")
    with pytest.raises(ValueError):
        load_config(toml)


def test_short_run_does_not_saturate_output_head(tmp_path):
    """Pixel L1 at the reference learning rates must not pin the tanh head to a constant."""
    cfg = small_cfg(tmp_path, batch_size=4, total_steps=30, log_every=30, probe_size=4)
    cfg.data = DataConfig(phantom_subjects=4, phantom_size=32)
    tr = Trainer(cfg)
    tr.fit()
    b = tr.probe_batch()
    with torch.no_grad():
        y = tr.G(b["x_in"], b["latent"], b["c1"], b["delta"])
    assert y.std().item() > 0.05
    assert (y.abs() < 0.999).float().mean().item() > 0.1


def test_ema_generator_receives_running_magnitudes(tmp_path):
    tr = Trainer(small_cfg(tmp_path, total_steps=3))
    tr.fit()
    live = dict(tr.G.named_buffers())
    for name, buf in tr.G_ema.named_buffers():
        assert torch.equal(buf, live[name])
        if name.endswith("magnitude_ema"):
            assert buf.item() != 1.0
