import json
import os
import subprocess
import sys

import pytest
import yaml

from fbanet.cli import main


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def run_fba(*args, env=None):
    full_env = {**os.environ, **(env or {})}
    return subprocess.run([sys.executable, "-m", "fbanet.cli", *map(str, args)],
                          capture_output=True, text=True, env=full_env, timeout=300)


def test_train_then_eval(tiny_raw, tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", tiny_raw)
    out = tmp_path / "run"
    assert main(["train", "-c", str(cfg), "-o", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["iterations"] == 3
    assert main(["eval", "-c", str(cfg), "--ckpt", str(out / "last.pt")]) == 0
    agg = json.loads(capsys.readouterr().out)
    assert set(agg) >= {"dice_mean", "dice_std", "asd_mean", "asd_std"}
    assert (out / "metrics.csv").exists() and (out / "metrics.json").exists()


def test_unknown_key_exits_2(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", {"contra": {"alpah": 1}})
    assert main(["train", "-c", str(cfg)]) == 2
    assert "alpah" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["train", "-c", str(tmp_path / "nope.yaml")]) == 2


def test_bad_checkpoint_exits_2(tiny_raw, tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", tiny_raw)
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"junk")
    assert main(["eval", "-c", str(cfg), "--ckpt", str(bad)]) == 2


def test_numerical_abort_exits_3(tiny_raw, tmp_path):
    raw = dict(tiny_raw, lr=1e30, lr_schedule="constant", iterations=20)
    cfg = write_yaml(tmp_path / "c.yaml", raw)
    assert main(["train", "-c", str(cfg), "-o", str(tmp_path / "run")]) == 3


def test_ablate_needs_two_variants(tiny_raw, tmp_path):
    m = write_yaml(tmp_path / "m.yaml", {"base": tiny_raw, "variants": {"only": {}}})
    assert main(["ablate", "-m", str(m)]) == 2


def test_ablate_prints_table(tiny_raw, tmp_path, capsys):
    m = write_yaml(tmp_path / "m.yaml", {
        "base": tiny_raw, "seeds": [0],
        "variants": {"baseline": {"loss": {"lambda_contra": 0, "lambda_consist": 0}}, "fba": {}},
    })
    assert main(["ablate", "-m", str(m), "-o", str(tmp_path / "abl")]) == 0
    out = capsys.readouterr().out
    assert "baseline" in out and "fba" in out
    assert (tmp_path / "abl" / "ablation.csv").exists()


def test_synth_writes_nifti(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "s.yaml", {"num_cases": 2, "shape": [16, 16]})
    assert main(["synth", "-c", str(cfg), "-o", str(tmp_path / "ds")]) == 0
    assert (tmp_path / "ds" / "manifest.csv").exists()
    assert (tmp_path / "ds" / "synth_config.json").exists()
    assert len(list((tmp_path / "ds" / "images").glob("*.nii.gz"))) == 2


def test_synth_degenerate_shape_exits_2(tmp_path):
    cfg = write_yaml(tmp_path / "s.yaml", {"shape": [4, 4]})
    assert main(["synth", "-c", str(cfg), "-o", str(tmp_path / "ds")]) == 2


def test_gradcheck_exits_zero(capsys):
    assert main(["gradcheck", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "contrastive.contrastive_loss" in out and "all passed" in out


def test_env_seed_changes_trajectory(tiny_raw, tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", tiny_raw)
    a = run_fba("train", "-c", cfg, "-o", tmp_path / "a", env={"FBA_SEED": "0"})
    b = run_fba("train", "-c", cfg, "-o", tmp_path / "b", env={"FBA_SEED": "5"})
    assert a.returncode == 0 and b.returncode == 0, a.stderr + b.stderr
    assert (tmp_path / "a" / "losses.csv").read_bytes() != (tmp_path / "b" / "losses.csv").read_bytes()
    assert json.loads((tmp_path / "b" / "config.json").read_text())["seed"] == 5


@pytest.mark.parametrize("workers", [1, 2])
def test_subprocess_runs_are_byte_identical(tiny_raw, tmp_path, workers):
    cfg = write_yaml(tmp_path / "c.yaml", dict(tiny_raw, num_workers=workers))
    a = run_fba("train", "-c", cfg, "-o", tmp_path / "a")
    b = run_fba("train", "-c", cfg, "-o", tmp_path / "b")
    assert a.returncode == 0 and b.returncode == 0, a.stderr + b.stderr
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()
