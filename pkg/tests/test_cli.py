import json
import subprocess
import sys

import nibabel as nib
import numpy as np
import pandas as pd
import pytest

from flowsynth.cli import run_command
from flowsynth.io_utils import read_sidecar, sidecar_path
from flowsynth.volume import load_volume

TOY_TOML = """seed = 0
[model]
channel_widths = [8, 8, 16]
time_embed_dim = 16
norm_groups = 4
head_channels = 8
[train]
epochs = 1
batch_size = 8
crop_size = 16
lr_generator = 1e-3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "toy.toml").write_text(TOY_TOML)
    assert run_command(["phantom", "--count", "3", "--size", "32", "--slices", "16", "--seed", "1",
                        "--out", str(root / "data")]) == 0
    assert run_command(["train", "--config", str(root / "toy.toml"), "--data", str(root / "data"),
                        "--out", str(root / "run"), "--max-steps", "2"]) == 0
    return root


def test_phantom_count_and_manifest(tmp_path, capsys):
    assert run_command(["phantom", "--count", "5", "--size", "64", "--seed", "0", "--out", str(tmp_path)]) == 0
    nifti = sorted(p.name for p in tmp_path.glob("*.nii.gz"))
    assert len(nifti) == 15
    assert (tmp_path / "phantom_000_mask.nii.gz").exists()
    manifest = pd.read_csv(tmp_path / "manifest.csv")
    assert list(manifest.columns) == ["stem", "seed", "size", "factor"]
    assert len(manifest) == 5 and manifest["size"].iloc[0] == "64x64x40"
    # stored RAS-ordered on disk; slices come back on the last axis
    assert load_volume(tmp_path / "phantom_000_tgt.nii.gz").shape == (64, 64, 40)
    events = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert events[-1]["event"] == "done" and events[-1]["count"] == 5


def test_phantom_seed_reproducible(tmp_path):
    for d in ("a", "b"):
        run_command(["phantom", "--count", "2", "--size", "32", "--slices", "16", "--seed", "9", "--out",
                     str(tmp_path / d)])
    for name in ("phantom_001_src.nii.gz", "phantom_001_tgt.nii.gz"):
        a = np.asanyarray(nib.load(tmp_path / "a" / name).dataobj)
        b = np.asanyarray(nib.load(tmp_path / "b" / name).dataobj)
        np.testing.assert_array_equal(a, b)


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("model.ckpt", "loss.csv", "loss.png", "config.toml"):
        assert (run / name).exists(), name
    loss = pd.read_csv(run / "loss.csv")
    assert list(loss.columns) == ["epoch", "mean_train_loss", "mean_val_loss", "wall_seconds"]
    side = read_sidecar(run / "model.ckpt")
    assert side["seed"] == 0 and len(side["config_digest"]) == 64


def test_synthesize_and_no_ar_sidecar(workspace):
    out = workspace / "syn_noar"
    assert run_command(["synthesize", "--ckpt", str(workspace / "run" / "model.ckpt"), "--input",
                        str(workspace / "data"), "--out", str(out), "--no-ar", "--config",
                        str(workspace / "toy.toml")]) == 0
    files = sorted(out.glob("*_syn.nii.gz"))
    assert len(files) == 3
    side = read_sidecar(files[0])
    assert side["ar_enabled"] is False and side["steps"] == 1
    assert side["model_kind"] == "flow_matching"


def test_synthesize_single_file_and_evaluate(workspace):
    syn = workspace / "syn"
    assert run_command(["synthesize", "--ckpt", str(workspace / "run" / "model.ckpt"), "--input",
                        str(workspace / "data"), "--out", str(syn), "--config", str(workspace / "toy.toml")]) == 0
    assert read_sidecar(syn / "phantom_000_syn.nii.gz")["ar_enabled"] is True
    single = workspace / "one_syn.nii.gz"
    assert run_command(["synthesize", "--ckpt", str(workspace / "run" / "model.ckpt"), "--input",
                        str(workspace / "data" / "phantom_000_src.nii.gz"), "--out", str(single),
                        "--config", str(workspace / "toy.toml")]) == 0
    assert load_volume(single).shape == (32, 32, 16)
    out = workspace / "metrics.csv"
    assert run_command(["evaluate", "--pred", str(syn), "--ref", str(workspace / "data"), "--out", str(out)]) == 0
    table = pd.read_csv(out)
    assert list(table.columns) == ["subject_id", "ssim", "fsim", "flicker_index"]
    assert len(table) == 3 and table["ssim"].between(-1, 1).all()
    assert out.with_suffix(".png").exists()


def test_stats_simulate(tmp_path):
    assert run_command(["stats", "--simulate", "60", "--seed", "2", "--out", str(tmp_path)]) == 0
    for name in ("cohort.csv", "group_tests.csv", "agreement.csv", "effect_sizes.png", "agreement.png"):
        assert (tmp_path / name).exists(), name
    g = pd.read_csv(tmp_path / "group_tests.csv")
    assert list(g.columns) == ["hemisphere", "subfield", "image_type", "H", "p_fdr", "epsilon_sq", "n"]
    assert len(g) == 28
    assert run_command(["stats", "--input", str(tmp_path / "cohort.csv"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "group_tests.csv").read_bytes() == (tmp_path / "group_tests.csv").read_bytes()


def test_augment_preview(workspace, tmp_path):
    assert run_command(["augment", "preview", "--input", str(workspace / "data" / "phantom_000_src.nii.gz"),
                        "--out", str(tmp_path), "--seed", "4"]) == 0
    for name in ("phantom_000_src_before.nii.gz", "phantom_000_src_after.nii.gz", "phantom_000_src_preview.png"):
        assert (tmp_path / name).exists()
    assert sidecar_path(tmp_path / "phantom_000_src_after.nii.gz").exists()


def test_exit_codes(tmp_path, capsys):
    assert run_command(["phantom"]) == 2
    assert run_command(["bogus"]) == 2
    assert run_command(["train", "--config", str(tmp_path / "nope.toml"), "--data", str(tmp_path),
                        "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nlr_generater = 1e-4\n")
    assert run_command(["train", "--config", str(bad), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "lr_generater" in capsys.readouterr().err
    typed = tmp_path / "typed.toml"
    typed.write_text('[train]\nepochs = "x"\n')
    assert run_command(["train", "--config", str(typed), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 5
    assert run_command(["synthesize", "--ckpt", str(tmp_path / "none.ckpt"), "--input", str(tmp_path / "x.nii.gz"),
                        "--out", str(tmp_path / "y.nii.gz")]) == 3
    assert run_command(["stats", "--out", str(tmp_path)]) == 3


def test_corrupted_checkpoint_exit(workspace, tmp_path):
    data = bytearray((workspace / "run" / "model.ckpt").read_bytes())
    data[-1] ^= 0x01
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(data))
    assert run_command(["synthesize", "--ckpt", str(bad), "--input",
                        str(workspace / "data" / "phantom_000_src.nii.gz"), "--out", str(tmp_path / "o.nii.gz")]) == 3
    assert not (tmp_path / "o.nii.gz").exists()


def test_failed_write_leaves_no_partial(tmp_path, monkeypatch):
    import flowsynth.plotting as plotting

    def boom(*a, **k):
        raise RuntimeError("disk full")

    monkeypatch.setattr(plotting.plt.Figure, "savefig", boom)
    with pytest.raises(RuntimeError):
        run_command(["stats", "--simulate", "20", "--seed", "0", "--out", str(tmp_path)])
    assert not list(tmp_path.glob("*.png")) and not list(tmp_path.glob("*.tmp*"))
    assert all(not p.name.startswith(".") for p in tmp_path.iterdir())


def test_workers_env_matches_serial(workspace, tmp_path, monkeypatch):
    args = ["synthesize", "--ckpt", str(workspace / "run" / "model.ckpt"), "--input", str(workspace / "data"),
            "--config", str(workspace / "toy.toml")]
    assert run_command(args + ["--out", str(tmp_path / "serial")]) == 0
    monkeypatch.setenv("FLOWSYNTH_WORKERS", "2")
    assert run_command(args + ["--out", str(tmp_path / "pool")]) == 0
    for p in sorted((tmp_path / "serial").glob("*_syn.nii.gz")):
        a = np.asanyarray(nib.load(p).dataobj)
        b = np.asanyarray(nib.load(tmp_path / "pool" / p.name).dataobj)
        np.testing.assert_array_equal(a, b)
    monkeypatch.setenv("FLOWSYNTH_WORKERS", "many")
    assert run_command(args + ["--out", str(tmp_path / "x")]) == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "flowsynth", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "flowsynth" in proc.stdout
