import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from unicoal import cli
from unicoal.config import DataConfig, ExperimentConfig, LossConfig, TrainConfig, desk_model_config
from unicoal.volume import MRVolume, read_volume, write_volume


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = ExperimentConfig(model=desk_model_config(32), loss=LossConfig(blur_images=10),
                           train=TrainConfig(batch_size=2, total_steps=2, checkpoint_every=0, out_dir=str(d / "run"),
                                             probe_size=2, log_every=1),
                           data=DataConfig(phantom_subjects=1, phantom_size=32, phantom_slices=6))
    cfg_path = d / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    assert cli.main(["train", "--config", str(cfg_path)]) == 0
    return d


def test_train_writes_checkpoint_and_logs(trained):
    assert (trained / "run" / "final.zip").exists()
    lines = (trained / "run" / "log.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["step"] == 1


def test_resume_continues(trained, tmp_path):
    assert cli.main(["train", "--config", str(trained / "cfg.json"), "--resume", str(trained / "run" / "final.zip"),
                     "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "final.zip").exists()


def test_simulate_infer_eval_pipeline(trained, tmp_path, capsys):
    hr = MRVolume(np.random.default_rng(0).uniform(-1, 1, (9, 32, 32)), "T1", thickness_mm=1.0)
    write_volume(hr, tmp_path / "hr.nii.gz")
    assert cli.main(["simulate-lr", "--input", str(tmp_path / "hr.nii.gz"), "--dsf", "4",
                     "--output", str(tmp_path / "lr.nii.gz")]) == 0
    lr = read_volume(tmp_path / "lr.nii.gz")
    assert lr.num_slices == 3 and lr.thickness_mm == 4
    assert cli.main(["infer", "--input", str(tmp_path / "lr.nii.gz"), "--source-modality", "T1",
                     "--target-modality", "T1", "--target-thickness", "1", "--checkpoint",
                     str(trained / "run" / "final.zip"), "--seed", "0", "--output", str(tmp_path / "sr.nii.gz")]) == 0
    assert read_volume(tmp_path / "sr.nii.gz").num_slices == 9
    capsys.readouterr()
    assert cli.main(["eval", "--pred", str(tmp_path / "sr.nii.gz"), "--gt", str(tmp_path / "hr.nii.gz"),
                     "--report", str(tmp_path / "report.json"), "--sheet", str(tmp_path / "sheet.png")]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert {"psnr", "ssim"} <= set(report)
    assert json.loads(capsys.readouterr().out) == report


def test_eval_with_masks(tmp_path):
    m = MRVolume((np.random.default_rng(0).random((3, 8, 8)) > 0.5).astype(np.float32), "mask")
    v = MRVolume(np.zeros((3, 8, 8)), "T1")
    for name, vol in (("m.npy", m), ("v.npy", v)):
        write_volume(vol, tmp_path / name)
    assert cli.main(["eval", "--pred", str(tmp_path / "v.npy"), "--gt", str(tmp_path / "v.npy"),
                     "--pred-mask", str(tmp_path / "m.npy"), "--gt-mask", str(tmp_path / "m.npy"),
                     "--report", str(tmp_path / "r.json")]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["dsc"] == 1.0
    assert cli.main(["eval", "--pred", str(tmp_path / "v.npy"), "--gt", str(tmp_path / "v.npy"),
                     "--pred-mask", str(tmp_path / "m.npy"), "--report", str(tmp_path / "r.json")]) == 2


def test_user_errors_exit_2(trained, tmp_path):
    assert cli.main(["simulate-lr", "--input", str(tmp_path / "missing.nii"), "--dsf", "2",
                     "--output", str(tmp_path / "o.nii")]) == 2
    write_volume(MRVolume(np.zeros((4, 32, 32)), "T1"), tmp_path / "x.npy")
    assert cli.main(["infer", "--input", str(tmp_path / "x.npy"), "--source-modality", "T1",
                     "--target-modality", "CT", "--target-thickness", "1", "--checkpoint",
                     str(trained / "run" / "final.zip"), "--output", str(tmp_path / "y.npy")]) == 2
    assert cli.main(["infer", "--input", str(tmp_path / "x.npy"), "--source-modality", "T1",
                     "--target-modality", "T1", "--target-thickness", "1", "--checkpoint",
                     str(tmp_path / "nope.zip"), "--output", str(tmp_path / "y.npy")]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["infer"])
    assert exc.value.code == 2


def test_internal_error_exit_3(monkeypatch, tmp_path):
    def boom(*a, **k):
        raise RuntimeError("kaput")
    monkeypatch.setattr("unicoal.data.simulate_thick_slices", boom)
    write_volume(MRVolume(np.zeros((4, 4, 4)), "T1"), tmp_path / "x.npy")
    assert cli.main(["simulate-lr", "--input", str(tmp_path / "x.npy"), "--dsf", "2",
                     "--output", str(tmp_path / "o.npy")]) == 3


def test_filters_csv(tmp_path):
    out = tmp_path / "f.csv"
    assert cli.main(["filters", "--resolution", "64", "--num-freqs", "5", "--output", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 14 * 5 and float(rows[0]["gain_db"]) == pytest.approx(0, abs=1e-9)


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "unicoal.cli", "filters", "--resolution", "32", "--num-freqs", "2"],
                       capture_output=True, text=True, check=True)
    assert r.stdout.startswith("layer,")
