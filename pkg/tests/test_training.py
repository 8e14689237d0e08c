"""Tests for the optimizer, batching, training loop, and checkpoint format."""

import numpy as np
import pytest

from seqvc import autodiff as ad
from seqvc import data as D
from seqvc import training as T
from seqvc.errors import (ConfigError, DimensionError, EmptyInputError, FormatError,
                          UnsupportedVersionError)
from seqvc.model import ModelConfig, init_parameters

TINY = ModelConfig(feature_dim=3, hidden_dim=8, attention_dim=5, reduction_factor=2)


def tiny_train_cfg(**kw):
    base = dict(batch_size=2, epochs=2, reduction_factor=2, warmup_steps=10,
                base_lr_scale=0.05, checkpoint_every=1, seed=0)
    base.update(kw)
    return T.TrainingConfig(**base)


def make_pairs(n, seed=0, d=3, lo=6, hi=12):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        src = int(rng.integers(lo, hi + 1))
        tar = int(rng.integers(lo, hi + 1))
        out.append((rng.normal(size=(src, d)), rng.normal(size=(tar, d))))
    return out


def test_lr_schedule_frozen_values():
    cfg = T.TrainingConfig()
    # at the warmup knee both branches meet at warmup^(-1/2)
    assert T.lr_at(4000, cfg) == pytest.approx(0.015811388300841896, rel=1e-12)
    assert T.lr_at(1, cfg) == pytest.approx(3.952847075210474e-06, rel=1e-12)
    scaled = T.TrainingConfig(base_lr_scale=0.25)
    assert T.lr_at(4000, scaled) == pytest.approx(0.25 * 0.015811388300841896)
    with pytest.raises(IndexError):
        T.lr_at(0, cfg)


def test_lr_schedule_shape():
    cfg = T.TrainingConfig(warmup_steps=100)
    before, knee, after = T.lr_at(50, cfg), T.lr_at(100, cfg), T.lr_at(200, cfg)
    assert before < knee and after < knee
    for step in (1, 7, 100, 10_000):
        assert T.lr_at(step, cfg) > 0


def test_adam_first_step_hand_value():
    theta = ad.ParameterSet()
    theta.add("w", np.array([[2.0]]))
    theta["w"].grad = np.array([[0.5]])
    state = T.OptimizerState.fresh(theta)
    T.adam_step(theta, state, lr=0.001, cfg=T.TrainingConfig())
    # m_hat = 0.5, v_hat = 0.25, update = -lr * 0.5 / (0.5 + eps) ~ -0.001
    assert state.step == 1
    assert theta["w"].data[0, 0] == pytest.approx(2.0 - 0.001, abs=1e-9)


def test_adam_zero_gradient_keeps_parameters():
    theta = ad.ParameterSet()
    theta.add("w", np.array([1.0, -2.0]))
    theta.zero_grads()
    state = T.OptimizerState.fresh(theta)
    T.adam_step(theta, state, lr=0.1, cfg=T.TrainingConfig())
    assert np.array_equal(theta["w"].data, np.array([1.0, -2.0]))
    assert state.step == 1


def test_adam_shape_mismatch():
    theta = ad.ParameterSet()
    theta.add("w", np.zeros(3))
    theta["w"].grad = np.zeros(4)
    state = T.OptimizerState.fresh(theta)
    with pytest.raises(DimensionError):
        T.adam_step(theta, state, lr=0.1, cfg=T.TrainingConfig())


def test_clip_gradients_bounds_norm():
    theta = ad.ParameterSet()
    theta.add("a", np.zeros((4, 4)))
    theta.add("b", np.zeros(7))
    theta["a"].grad = np.full((4, 4), 3.0)
    theta["b"].grad = np.full(7, -2.0)
    pre = T.clip_gradients(theta, 1.0)
    post = np.sqrt(sum(float((t.grad ** 2).sum()) for _, t in theta.items()))
    assert pre > 1.0 and post <= 1.0 + 1e-9
    # norms already under the threshold pass through untouched
    theta["a"].grad = np.zeros((4, 4))
    theta["b"].grad = np.full(7, 1e-3)
    before = theta["b"].grad.copy()
    T.clip_gradients(theta, 1.0)
    assert np.array_equal(theta["b"].grad, before)


def test_make_batches_counts_and_masks():
    pairs = [(np.ones((5, 2)), np.ones((6, 2))) for _ in range(64)]
    batches = T.make_batches(pairs, 32, seed=0, reduction_factor=2)
    assert len(batches) == 2
    for b in batches:
        assert b.x.shape == (32, 5, 2)
        assert b.y.shape == (32, 6, 2)
        assert (b.source_lengths == 5).all() and (b.target_lengths == 6).all()


def test_make_batches_pads_targets_to_reduction_multiple():
    pairs = [(np.ones((4, 2)), np.ones((7, 2))), (np.ones((4, 2)), np.ones((5, 2)))]
    (batch,) = T.make_batches(pairs, 2, seed=1, reduction_factor=3)
    assert batch.y.shape[1] == 9
    assert sorted(batch.target_lengths.tolist()) == [5, 7]


def test_make_batches_deterministic_and_bucketed():
    pairs = make_pairs(40, seed=3, lo=4, hi=30)
    a = T.make_batches(pairs, 8, seed=5, reduction_factor=2)
    b = T.make_batches(pairs, 8, seed=5, reduction_factor=2)
    assert len(a) == 5
    for ba, bb in zip(a, b):
        assert np.array_equal(ba.x, bb.x) and np.array_equal(ba.y, bb.y)
    c = T.make_batches(pairs, 8, seed=6, reduction_factor=2)
    assert any(not np.array_equal(ba.x.shape, bc.x.shape) or
               not np.array_equal(ba.x, bc.x) for ba, bc in zip(a, c))
    # bucketing: spread of source lengths within a batch stays well below the
    # spread of the whole dataset
    spreads = [b.source_lengths.max() - b.source_lengths.min() for b in a]
    assert max(spreads) <= 10
    with pytest.raises(EmptyInputError):
        T.make_batches([], 8, seed=0, reduction_factor=2)


def test_training_config_validation():
    with pytest.raises(ConfigError):
        T.TrainingConfig(batch_size=0)
    with pytest.raises(ConfigError):
        T.TrainingConfig(sigma_g=0.0)
    with pytest.raises(ConfigError):
        T.TrainingConfig(adam_beta1=1.0)
    with pytest.raises(ConfigError):
        T.TrainingConfig(lambda_ga=-1.0)
    defaults = T.TrainingConfig()
    assert (defaults.batch_size, defaults.epochs, defaults.reduction_factor) == (32, 1000, 5)
    assert (defaults.sigma_g, defaults.lambda_ga, defaults.lambda_cp) == (0.4, 10000.0, 10.0)
    assert (defaults.adam_beta1, defaults.adam_beta2, defaults.adam_eps) == (0.9, 0.999, 1e-8)
    assert defaults.warmup_steps == 4000


def test_smoke_train_two_pairs():
    pairs = make_pairs(2, seed=1)
    result = T.train(pairs, TINY, tiny_train_cfg())
    assert not result.aborted and result.epochs_run == 2
    assert len(result.log_lines) == 2
    for line in result.log_lines:
        cols = line.split("\t")
        assert len(cols) == 8
        assert all(np.isfinite(float(v)) for v in cols[1:])


def test_train_is_bitwise_deterministic(tmp_path):
    pairs = make_pairs(6, seed=2)
    kw = dict(model_cfg=TINY, cfg=tiny_train_cfg(epochs=3))
    res_a = T.train(pairs, checkpoint_path=tmp_path / "a.as2s",
                    log_path=tmp_path / "a.log", **kw)
    res_b = T.train(pairs, checkpoint_path=tmp_path / "b.as2s",
                    log_path=tmp_path / "b.log", **kw)
    assert (tmp_path / "a.as2s").read_bytes() == (tmp_path / "b.as2s").read_bytes()
    assert (tmp_path / "a.log").read_text() == (tmp_path / "b.log").read_text()
    assert res_a.log_lines == res_b.log_lines


def test_padded_frames_contribute_zero_gradient():
    from seqvc.losses import GuidedAttentionConfig, LossWeights, batch_loss_breakdown
    from seqvc.model import forward_training_batch

    rng = np.random.default_rng(7)
    pair = (rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))
    theta = init_parameters(TINY, seed=0)

    def grads_for(x, y):
        theta.zero_grads()
        out = forward_training_batch(x, np.array([5, 5]), y, np.array([6, 6]),
                                     theta, TINY)
        breakdown = batch_loss_breakdown(out, x, y, np.array([5, 5]),
                                         np.array([6, 6]), LossWeights(),
                                         GuidedAttentionConfig())
        ad.backward(breakdown.total)
        return {n: t.grad.copy() for n, t in theta.items()}

    x_tight = np.stack([pair[0], pair[0]])
    y_tight = np.stack([pair[1], pair[1]])
    x_wide = np.concatenate([x_tight, np.zeros((2, 3, 3))], axis=1)
    y_wide = np.concatenate([y_tight, np.zeros((2, 4, 3))], axis=1)
    g_tight = grads_for(x_tight, y_tight)
    g_wide = grads_for(x_wide, y_wide)

    # padded content provably contributes zero: overwriting the padding with
    # junk leaves every gradient bitwise unchanged
    x_junk, y_junk = x_wide.copy(), y_wide.copy()
    x_junk[:, 5:, :] = 7.7
    y_junk[:, 6:, :] = -3.3
    g_junk = grads_for(x_junk, y_junk)
    for name in g_wide:
        assert np.array_equal(g_wide[name], g_junk[name]), name

    # widening the buffers regroups BLAS reductions, so tight vs padded grads
    # agree to summation-order noise only
    for name in g_tight:
        scale = max(float(np.abs(g_tight[name]).max()), 1e-12)
        assert np.abs(g_tight[name] - g_wide[name]).max() <= 1e-12 * scale, name


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    pairs = make_pairs(3, seed=4)
    result = T.train(pairs, TINY, tiny_train_cfg(epochs=1))
    ckpt = result.checkpoint
    path = tmp_path / "model.as2s"
    ckpt.save(path)
    back = T.load_checkpoint(path)
    assert back.step == ckpt.step
    assert set(back.params) == set(ckpt.params)
    for name in ckpt.params:
        assert np.array_equal(back.params[name], ckpt.params[name])
        assert np.array_equal(back.first[name], ckpt.first[name])
        assert np.array_equal(back.second[name], ckpt.second[name])
    assert back.config == ckpt.config
    for name in ckpt.norm:
        assert np.array_equal(back.norm[name], ckpt.norm[name])
    # a second save of the loaded checkpoint is byte-identical
    back.save(tmp_path / "again.as2s")
    assert (tmp_path / "again.as2s").read_bytes() == path.read_bytes()


def test_checkpoint_reconstructs_model_config(tmp_path):
    result = T.train(make_pairs(2, seed=5), TINY, tiny_train_cfg(epochs=1))
    ckpt = result.checkpoint
    assert ckpt.to_model_config() == TINY
    theta = ckpt.to_parameter_set()
    assert set(theta.names()) == set(ckpt.params)
    stats = ckpt.norm_stats()
    assert np.array_equal(stats.src_std, np.ones(3))


def test_checkpoint_corrupt_files(tmp_path):
    result = T.train(make_pairs(2, seed=6), TINY, tiny_train_cfg(epochs=1))
    path = tmp_path / "ok.as2s"
    result.checkpoint.save(path)
    blob = path.read_bytes()

    bad_magic = tmp_path / "magic.as2s"
    bad_magic.write_bytes(b"ZZZZ" + blob[4:])
    with pytest.raises(FormatError, match="byte 0"):
        T.load_checkpoint(bad_magic)

    truncated = tmp_path / "short.as2s"
    truncated.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(FormatError, match=str(len(blob) // 2)):
        T.load_checkpoint(truncated)

    versioned = tmp_path / "version.as2s"
    mutated = bytearray(blob)
    mutated[4] = 7
    versioned.write_bytes(bytes(mutated))
    with pytest.raises(UnsupportedVersionError):
        T.load_checkpoint(versioned)

    trailing = tmp_path / "extra.as2s"
    trailing.write_bytes(blob + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        T.load_checkpoint(trailing)


def test_train_loss_decreases_on_copy_task():
    # identity task: target equals source, no warp, no noise
    cfg = D.SyntheticTaskConfig(feature_dim=3, min_frames=6, max_frames=10,
                                rho_min=1.0, rho_max=1.0, noise_std=0.0,
                                pairs=8, seed=0, transform=np.eye(3),
                                bias=np.zeros(3))
    pairs, _ = D.gen_synthetic(cfg)
    pairs = [(x.astype(float), y.astype(float)) for x, y in pairs]
    result = T.train(pairs, TINY,
                     tiny_train_cfg(epochs=20, batch_size=4, warmup_steps=40,
                                    base_lr_scale=0.3))
    assert not result.aborted
    first = float(result.log_lines[0].split("\t")[6])
    last = float(result.log_lines[-1].split("\t")[6])
    assert last < first


def test_train_aborts_on_nonfinite_and_retains_checkpoint(tmp_path):
    pairs = make_pairs(4, seed=8)
    pairs[2][0][1, 1] = np.nan
    cfg = tiny_train_cfg(epochs=30)
    path = tmp_path / "latest.as2s"
    result = T.train(pairs, TINY, cfg, checkpoint_path=path)
    assert result.aborted
    assert result.epochs_run < 30
    ckpt = T.load_checkpoint(path)
    for value in ckpt.params.values():
        assert np.isfinite(value).all()
