"""Tests for feature file I/O, the synthetic generator, and normalization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqvc import data as D
from seqvc.errors import ConfigError, EmptyInputError, FormatError, UnsupportedVersionError


def test_feature_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 3)).astype(np.float32)
    path = tmp_path / "a.atf"
    D.write_features(path, x)
    back = D.read_features(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, x)
    # float64 input is quantized once at write time
    y = rng.normal(size=(4, 2))
    D.write_features(path, y)
    assert np.array_equal(D.read_features(path), y.astype(np.float32))


def test_write_features_rejects_empty(tmp_path):
    with pytest.raises(EmptyInputError):
        D.write_features(tmp_path / "e.atf", np.zeros((0, 3)))
    with pytest.raises(EmptyInputError):
        D.write_features(tmp_path / "e.atf", np.zeros((3, 0)))
    with pytest.raises(EmptyInputError):
        D.write_features(tmp_path / "e.atf", np.zeros(3))


def test_read_features_bad_magic(tmp_path):
    path = tmp_path / "bad.atf"
    path.write_bytes(b"XXXX" + bytes(9))
    with pytest.raises(FormatError, match="magic"):
        D.read_features(path)


def test_read_features_truncation_reports_offset(tmp_path):
    path = tmp_path / "t.atf"
    D.write_features(path, np.ones((5, 2), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(FormatError, match=str(len(blob) - 3)):
        D.read_features(path)


def test_read_features_unsupported_version(tmp_path):
    path = tmp_path / "v.atf"
    D.write_features(path, np.ones((2, 2), dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[4] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedVersionError):
        D.read_features(path)


def test_identity_task_reproduces_source_exactly():
    d = 4
    cfg = D.SyntheticTaskConfig(feature_dim=d, rho_min=1.0, rho_max=1.0,
                                noise_std=0.0, pairs=3, seed=5,
                                transform=np.eye(d), bias=np.zeros(d))
    pairs, gt = D.gen_synthetic(cfg)
    assert np.array_equal(gt.rhos, np.ones(3))
    for x, y in pairs:
        assert np.array_equal(x, y)


def test_warp_length_contract():
    cfg = D.SyntheticTaskConfig(min_frames=40, max_frames=40, rho_min=0.5,
                                rho_max=0.5, pairs=2, seed=1)
    pairs, _ = D.gen_synthetic(cfg)
    for x, y in pairs:
        assert x.shape[0] == 40 and y.shape[0] == 20
    assert D.warp_length(40, 0.5) == 20
    assert D.warp_length(40, 1.3) == 52
    assert D.warp_length(7, 1.0) == 7


def test_generator_deterministic_bytes(tmp_path):
    cfg = D.SyntheticTaskConfig(pairs=4, seed=11)
    pairs_a, gt_a = D.gen_synthetic(cfg)
    pairs_b, gt_b = D.gen_synthetic(D.SyntheticTaskConfig(pairs=4, seed=11))
    for (xa, ya), (xb, yb) in zip(pairs_a, pairs_b):
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    assert np.array_equal(gt_a.rhos, gt_b.rhos)

    dir_a, dir_b = tmp_path / "a", tmp_path / "b"
    D.write_dataset(dir_a, pairs_a, gt_a)
    D.write_dataset(dir_b, pairs_b, gt_b)
    for name in sorted(p.name for p in dir_a.iterdir()):
        assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes()


def test_generated_values_bounded():
    cfg = D.SyntheticTaskConfig(pairs=20, seed=3)
    pairs, gt = D.gen_synthetic(cfg)
    bound = (np.abs(gt.transform).sum(axis=1).max() + np.abs(gt.bias).max()
             + 5.0 * cfg.noise_std)
    for x, y in pairs:
        assert np.isfinite(x).all() and np.isfinite(y).all()
        assert np.abs(x).max() <= bound and np.abs(y).max() <= bound


def test_groundtruth_allows_exact_recomputation(tmp_path):
    cfg = D.SyntheticTaskConfig(pairs=5, seed=9, noise_std=0.0)
    pairs, gt = D.gen_synthetic(cfg)
    manifest = D.write_dataset(tmp_path, pairs, gt)
    gt_back = D.read_groundtruth(tmp_path / "groundtruth.tsv")
    assert np.array_equal(gt_back.transform, gt.transform)
    assert np.array_equal(gt_back.bias, gt.bias)
    assert np.array_equal(gt_back.rhos, gt.rhos)
    for k, (src, tar) in enumerate(D.load_pairs(manifest)):
        redone = D.synthesize_target(src.astype(float), gt_back.transform,
                                     gt_back.bias, gt_back.rhos[k])
        assert np.array_equal(redone.astype(np.float32), tar)


def test_rho_and_length_ranges():
    cfg = D.SyntheticTaskConfig(pairs=30, seed=2)
    pairs, gt = D.gen_synthetic(cfg)
    assert ((gt.rhos >= cfg.rho_min) & (gt.rhos <= cfg.rho_max)).all()
    for (x, y), rho in zip(pairs, gt.rhos):
        assert cfg.min_frames <= x.shape[0] <= cfg.max_frames
        assert y.shape[0] == D.warp_length(x.shape[0], rho)


def test_manifest_order_and_relative_paths(tmp_path):
    entries = [("b_src.atf", "b_tar.atf"), ("a_src.atf", "a_tar.atf")]
    path = tmp_path / "manifest.tsv"
    D.write_manifest(path, entries)
    back = D.read_manifest(path)
    assert [p.name for p, _ in back] == ["b_src.atf", "a_src.atf"]
    assert back[0][0].parent == tmp_path
    (tmp_path / "bad.tsv").write_text("only_one_column\n")
    with pytest.raises(FormatError):
        D.read_manifest(tmp_path / "bad.tsv")


def test_config_validation():
    with pytest.raises(ConfigError):
        D.SyntheticTaskConfig(min_frames=1)
    with pytest.raises(ConfigError):
        D.SyntheticTaskConfig(rho_min=0.0)
    with pytest.raises(ConfigError):
        D.SyntheticTaskConfig(rho_min=1.2, rho_max=0.9)
    with pytest.raises(ConfigError):
        D.SyntheticTaskConfig(pairs=0)
    with pytest.raises(ConfigError):
        D.SyntheticTaskConfig(noise_std=-0.1)
    with pytest.raises(ConfigError, match="condition"):
        bad = np.zeros((8, 8))
        bad[0, 0] = 1.0
        D.SyntheticTaskConfig(transform=bad, bias=np.zeros(8))
    with pytest.raises(ConfigError, match="together"):
        D.SyntheticTaskConfig(transform=np.eye(8))


def test_norm_stats_and_roundtrip():
    rng = np.random.default_rng(4)
    pairs = [(rng.normal(2.0, 3.0, size=(11, 5)), rng.normal(-1.0, 0.5, size=(13, 5)))
             for _ in range(6)]
    stats = D.compute_norm(pairs)
    normed = D.normalize_pairs(pairs, stats)
    all_src = np.concatenate([x for x, _ in normed], axis=0)
    all_tar = np.concatenate([y for _, y in normed], axis=0)
    assert np.abs(all_src.mean(axis=0)).max() < 1e-6
    assert np.abs(all_tar.mean(axis=0)).max() < 1e-6
    x = pairs[0][0]
    z = D.apply_norm(x, stats.src_mean, stats.src_std)
    assert np.abs(D.invert_norm(z, stats.src_mean, stats.src_std) - x).max() < 1e-6


def test_norm_constant_dimension_floored():
    pairs = [(np.full((4, 2), 7.0), np.full((4, 2), 7.0))]
    stats = D.compute_norm(pairs)
    assert (stats.src_std == 1e-6).all()
    z = D.apply_norm(pairs[0][0], stats.src_mean, stats.src_std)
    assert np.array_equal(z, np.zeros((4, 2)))
    with pytest.raises(EmptyInputError):
        D.compute_norm([])


@settings(deadline=None, max_examples=25)
@given(frames=st.integers(2, 50), rho=st.floats(0.3, 2.5))
def test_warp_endpoints_preserved(frames, rho):
    rng = np.random.default_rng(frames)
    x = rng.normal(size=(frames, 3))
    out = D.synthesize_target(x, np.eye(3), np.zeros(3), rho)
    assert out.shape[0] == D.warp_length(frames, rho)
    assert np.allclose(out[0], x[0])
    if out.shape[0] > 1:
        assert np.allclose(out[-1], x[-1])
