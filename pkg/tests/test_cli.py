"""End-to-end tests of the command-line surface."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from seqvc import cli
from seqvc.data import read_features
from seqvc.errors import ConfigError

# a fast profile: small model, few pairs, short sequences
FAST = ["--feature_dim", "3", "--hidden_dim", "8", "--attention_dim", "5",
        "--reduction_factor", "2", "--min_frames", "6", "--max_frames", "10",
        "--pairs", "6", "--epochs", "2", "--batch_size", "3",
        "--warmup_steps", "10", "--base_lr_scale", "0.05",
        "--checkpoint_every", "1"]


def run_pipeline(tmp_path, seed="7"):
    data = tmp_path / "data"
    rundir = tmp_path / "run"
    assert cli.main(["gen-data", "--out", str(data), "--seed", seed] + FAST) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(rundir),
                     "--seed", seed] + FAST) == 0
    return data, rundir


def tree_digest(root: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.iterdir()) if p.is_file()}


def test_defaults_match_published_values():
    run = cli.parse_config()
    assert run["sigma_g"] == 0.4
    assert run["lambda_ga"] == 10000.0
    assert run["lambda_cp"] == 10.0
    assert run["lambda_stop"] == 1.0
    assert run["batch_size"] == 32
    assert run["reduction_factor"] == 5
    assert run["epochs"] == 1000
    assert run["warmup_steps"] == 4000
    tc = run.training()
    assert (tc.adam_beta1, tc.adam_beta2, tc.adam_eps) == (0.9, 0.999, 1e-8)


def test_config_file_and_override_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\n\nsigma_g = 0.2\nbatch_size = 8\n")
    run = cli.parse_config(cfg)
    assert run["sigma_g"] == 0.2 and run["batch_size"] == 8
    run = cli.parse_config(cfg, overrides=[("sigma_g", "0.3")])
    assert run["sigma_g"] == 0.3 and run["batch_size"] == 8


def test_unknown_key_lists_valid_keys(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("sigma_gg = 0.2\n")
    with pytest.raises(ConfigError, match="sigma_g"):
        cli.parse_config(cfg)
    with pytest.raises(ConfigError, match="valid keys"):
        cli.parse_config(overrides=[("nope", "1")])
    with pytest.raises(ConfigError, match="expects int"):
        cli.parse_config(overrides=[("batch_size", "1.5")])
    cfg.write_text("no equals sign\n")
    with pytest.raises(ConfigError, match="key = value"):
        cli.parse_config(cfg)


def test_invalid_value_exits_one(tmp_path, capsys):
    code = cli.main(["gen-data", "--out", str(tmp_path / "d"),
                     "--sigma_g", "-1"] + FAST)
    # sigma_g only matters at train time but is validated up front
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and "sigma_g" in err and "\n" not in err.rstrip("\n")


def test_unknown_subcommand_exits_one(capsys):
    assert cli.main(["frobnicate"]) == 1
    assert "error:" in capsys.readouterr().err


def test_gen_data_writes_dataset(tmp_path):
    data = tmp_path / "d"
    assert cli.main(["gen-data", "--out", str(data), "--pairs", "4",
                     "--seed", "7"] + FAST[:10]) == 0
    names = sorted(p.name for p in data.iterdir())
    assert "manifest.tsv" in names and "groundtruth.tsv" in names
    assert sum(n.endswith(".atf") for n in names) == 8


def test_pipeline_runs_and_artifacts_exist(tmp_path):
    data, rundir = run_pipeline(tmp_path)
    assert (rundir / "final.as2s").exists()
    log = (rundir / "train.log").read_text().splitlines()
    assert len(log) == 2 and all(len(l.split("\t")) == 8 for l in log)

    src = data / "pair_0000_src.atf"
    out = tmp_path / "converted.atf"
    att = tmp_path / "attention.csv"
    assert cli.main(["convert", "--checkpoint", str(rundir / "final.as2s"),
                     "--input", str(src), "--output", str(out),
                     "--attention", str(att)] + FAST) == 0
    y_hat = read_features(out)
    assert y_hat.ndim == 2 and y_hat.shape[1] == 3 and y_hat.shape[0] % 2 == 0

    report = tmp_path / "report.txt"
    assert cli.main(["eval", "--checkpoint", str(rundir / "final.as2s"),
                     "--data", str(data), "--report", str(report)] + FAST) == 0
    text = report.read_text()
    assert "aggregate:" in text and "pair_count: 6" in text

    pgm = tmp_path / "attention.pgm"
    assert cli.main(["export-attention", "--input", str(att),
                     "--output", str(pgm)]) == 0
    assert pgm.read_bytes().startswith(b"P5\n")


def test_identical_invocations_byte_identical(tmp_path):
    data_a, run_a = run_pipeline(tmp_path / "a")
    data_b, run_b = run_pipeline(tmp_path / "b")
    assert tree_digest(data_a) == tree_digest(data_b)
    assert tree_digest(run_a) == tree_digest(run_b)


def test_train_does_not_mutate_inputs(tmp_path):
    data, _ = run_pipeline(tmp_path)
    before = tree_digest(data)
    assert cli.main(["train", "--data", str(data), "--out",
                     str(tmp_path / "run2"), "--seed", "9"] + FAST) == 0
    assert tree_digest(data) == before


def test_convert_corrupt_checkpoint_exits_two(tmp_path, capsys):
    data, rundir = run_pipeline(tmp_path)
    bad = tmp_path / "bad.as2s"
    bad.write_bytes(b"ZZZZ" + bytes(20))
    code = cli.main(["convert", "--checkpoint", str(bad),
                     "--input", str(data / "pair_0000_src.atf"),
                     "--output", str(tmp_path / "y.atf")])
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


def test_missing_checkpoint_exits_two(tmp_path, capsys):
    code = cli.main(["convert", "--checkpoint", str(tmp_path / "absent.as2s"),
                     "--input", str(tmp_path / "x.atf"),
                     "--output", str(tmp_path / "y.atf")])
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


def test_config_file_flag_reaches_training(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(data), "--seed", "3"] + FAST) == 0
    cfg = tmp_path / "run.cfg"
    cfg.write_text("\n".join(f"{FAST[i].lstrip('-')} = {FAST[i + 1]}"
                             for i in range(0, len(FAST), 2)) + "\nepochs = 1\n")
    rundir = tmp_path / "run"
    assert cli.main(["train", "--data", str(data), "--out", str(rundir),
                     "--config", str(cfg)]) == 0
    assert len((rundir / "train.log").read_text().splitlines()) == 1
