import io
import json
from pathlib import Path

import pytest
import torch
import yaml

from uaprepair.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, main
from uaprepair.config import ARTIFACT_ENV, ConfigError, apply_overrides, load_config
from uaprepair.perturbation import load_perturbation, save_perturbation, zero_perturbation


@pytest.fixture
def config_file(tmp_path, monkeypatch):
    monkeypatch.delenv(ARTIFACT_ENV, raising=False)
    cfg = {
        "dataset": "synthetic-blobs",
        "arch": "small_cnn",
        "data_root": str(tmp_path / "data"),
        "artifact_dir": str(tmp_path / "artifacts"),
        "blobs": {"n_train": 160, "n_test": 40, "image_size": 8, "jitter": 1, "blob_sigma": 1.0},
        "train": {"epochs": 1, "batch_size": 16},
        "attack": {"settings": {"epochs_over_data": 1, "batch_size": 32}, "patch_fraction": 0.1},
        "defense": {"epochs": 1, "batch_size": 8},
        "eval": {"epsilons": [0.0, 0.02]},
    }
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    fields = dict(line.split("\t", 1) for line in out.getvalue().splitlines())
    return code, fields


def test_config_overrides_and_env(config_file, monkeypatch, tmp_path):
    cfg = load_config(config_file, ["defense.alpha=0.3", "attack.settings.rho=0.5", "seed=7"])
    assert cfg.defense.alpha == 0.3 and cfg.attack.settings.rho == 0.5 and cfg.seed == 7
    monkeypatch.setenv(ARTIFACT_ENV, str(tmp_path / "elsewhere"))
    assert load_config(config_file).artifact_dir == str(tmp_path / "elsewhere")
    with pytest.raises(ConfigError, match="arch"):
        load_config(config_file, ["arch=resnet"])
    with pytest.raises(ConfigError, match="defense"):
        load_config(config_file, ["defense.alpha=2"])
    with pytest.raises(ConfigError, match="bogus"):
        load_config(config_file, ["train.bogus=1"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_full_pipeline(config_file, tmp_path):
    art = tmp_path / "artifacts"
    code, out = run("--config", config_file, "train")
    assert code == EXIT_OK
    ckpt = art / "checkpoints" / "baseline"
    assert (ckpt / "manifest.json").exists() and (ckpt / "run.manifest.json").exists()
    first_checksum = out["checksum"]

    # idempotent: same seed, same parameters
    code, again = run("--config", config_file, "train")
    assert code == EXIT_OK and again["checksum"] == first_checksum

    for kind in ("targeted", "spgd", "patch", "nontargeted"):
        code, out = run("--config", config_file, "attack", "--kind", kind)
        assert code == EXIT_OK, kind
        assert 0.0 <= float(out["sr"]) <= 1.0
        manifest = json.loads((art / "uaps" / (out["perturbation"].split("/")[-1] + ".manifest.json")).read_text())
        assert manifest["config"]["arch"] == "small_cnn"

    targeted = art / "uaps" / "targeted-t0.uap"
    code, out = run("--config", config_file, "attack", "--kind", "adaptive", "--out", tmp_path / "ad.uap")
    assert code == EXIT_OK
    assert torch.equal(load_perturbation(tmp_path / "ad.uap").delta, load_perturbation(targeted).delta)
    assert (tmp_path / "ad.uap").read_bytes().split(b"\n", 1)[1] == targeted.read_bytes().split(b"\n", 1)[1]

    code, out = run("--config", config_file, "analyze", "--perturbation", targeted)
    assert code == EXIT_OK
    assert out["gap_probe"] == "final.dense"
    for key in ("report", "table", "figure"):
        assert Path(out[key]).exists()

    code, out = run("--config", config_file, "defend")
    assert code == EXIT_OK
    assert int(out["clean_subset"]) == 8
    assert (art / "checkpoints" / "defended" / "manifest.json").exists()
    log_lines = (art / "reports" / "defense-log-defended.tsv").read_text().splitlines()
    assert log_lines[0].startswith("epoch\tbatch\tloss")

    code, out = run("--config", config_file, "eval", "--perturbation", targeted,
                    "--reference-model", art / "checkpoints" / "baseline")
    assert code == EXIT_OK
    assert float(out["delta_clean_acc"]) == pytest.approx(float(out["clean_acc"]) - _baseline_acc(art), abs=1e-6)

    code, out = run("--config", config_file, "sweep-eps")
    assert code == EXIT_OK
    assert (art / "figures" / "epsilon-sweep.png").exists()
    rows = (art / "reports" / "epsilon-sweep.tsv").read_text().splitlines()
    assert len(rows) == 1 + 2 * 2

    code, out = run("--config", config_file, "reattack", "--kind", "targeted")
    assert code == EXIT_OK and float(out["sr"]) >= 0.0


def _baseline_acc(art):
    return json.loads((art / "checkpoints" / "baseline" / "manifest.json").read_text())["clean_acc"]


def test_analyze_zero_perturbation_and_bad_probe(config_file, tmp_path):
    assert run("--config", config_file, "train")[0] == EXIT_OK
    zero = save_perturbation(zero_perturbation((3, 8, 8), 0.0, 0), tmp_path / "zero.uap")
    code, out = run("--config", config_file, "analyze", "--perturbation", zero)
    assert code == EXIT_OK and float(out["entropy_gap"]) == 0.0
    code, _ = run("--config", config_file, "analyze", "--perturbation", zero, "--probes", "stage7.pool")
    assert code == EXIT_CONFIG


def test_error_exit_codes(config_file, tmp_path, capsys):
    code, _ = run("--config", config_file, "--set", "arch=resnet", "train")
    assert code == EXIT_CONFIG
    assert "arch" in capsys.readouterr().err
    code, _ = run("--config", config_file, "attack", "--model", tmp_path / "nowhere")
    assert code == EXIT_IO
    code, _ = run("--config", tmp_path / "missing.yaml", "train")
    assert code == EXIT_CONFIG
    code, _ = run("--config", config_file, "--set", "train.learning_rate=1e30", "train")
    assert code == EXIT_NUMERICAL
