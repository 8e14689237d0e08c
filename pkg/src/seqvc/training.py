"""Optimization loop: warmup learning-rate schedule, bias-corrected Adam,
length-bucketed batching with padding masks, and the binary checkpoint format.

Everything here is deterministic for a fixed seed, config, and dataset; two
identical runs produce bitwise-identical checkpoints and logs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet
from .data import NormStats
from .errors import (ConfigError, DimensionError, EmptyInputError, FormatError,
                     NumericalError, UnsupportedVersionError)
from .losses import GuidedAttentionConfig, LossWeights, batch_loss_breakdown
from .model import ModelConfig, decoder_steps, forward_training_batch, init_parameters

_CKPT_MAGIC = b"AS2S"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 32
    epochs: int = 1000
    reduction_factor: int = 5
    sigma_g: float = 0.4
    lambda_ga: float = 10000.0
    lambda_cp: float = 10.0
    lambda_stop: float = 1.0
    stop_weight: float = 5.0
    warmup_steps: int = 4000
    base_lr_scale: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    checkpoint_every: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "epochs", "reduction_factor", "warmup_steps",
                     "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("sigma_g", "base_lr_scale", "adam_eps", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lambda_ga", "lambda_cp", "lambda_stop", "stop_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, "
                                  f"got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), "
                                  f"got {getattr(self, name)}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


def lr_at(step: int, cfg: TrainingConfig) -> float:
    """Warmup-then-decay schedule; steps count from 1."""
    if step < 1:
        raise IndexError(f"learning-rate schedule starts at step 1, got {step}")
    return cfg.base_lr_scale * min(step ** -0.5, step * cfg.warmup_steps ** -1.5)


@dataclass
class OptimizerState:
    first: dict
    second: dict
    step: int = 0

    @classmethod
    def fresh(cls, theta: ParameterSet) -> "OptimizerState":
        return cls(first={n: np.zeros_like(t.data) for n, t in theta.items()},
                   second={n: np.zeros_like(t.data) for n, t in theta.items()})


def adam_step(theta: ParameterSet, state: OptimizerState, lr: float,
              cfg: TrainingConfig) -> None:
    """Bias-corrected Adam update in place; one call per batch."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, t in theta.items():
        g = t.grad
        if g is None:
            continue
        m, v = state.first[name], state.second[name]
        if g.shape != m.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match moment "
                                 f"shape {m.shape} for {name!r}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data -= lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)


def clip_gradients(theta: ParameterSet, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm; returns
    the pre-clip norm."""
    total = 0.0
    for _, t in theta.items():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for _, t in theta.items():
            if t.grad is not None:
                t.grad *= factor
    return norm


@dataclass
class Batch:
    x: np.ndarray
    source_lengths: np.ndarray
    y: np.ndarray
    target_lengths: np.ndarray


def make_batches(pairs, batch_size: int, seed: int, reduction_factor: int) -> list:
    """Shuffle by seed, bucket by source length, pad to per-batch maxima.

    Targets are padded to a multiple of the reduction factor; true lengths
    travel with the batch so masks can be rebuilt downstream.
    """
    if not pairs:
        raise EmptyInputError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pairs))
    src_lens = np.array([pairs[k][0].shape[0] for k in perm])
    perm = perm[np.argsort(src_lens, kind="stable")]
    chunks = [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
    order = rng.permutation(len(chunks))
    batches = []
    for chunk_idx in order:
        chunk = chunks[chunk_idx]
        xs = [np.asarray(pairs[k][0], dtype=ad.DEFAULT_DTYPE) for k in chunk]
        ys = [np.asarray(pairs[k][1], dtype=ad.DEFAULT_DTYPE) for k in chunk]
        n_src = max(x.shape[0] for x in xs)
        n_steps = max(decoder_steps(y.shape[0], reduction_factor) for y in ys)
        d = xs[0].shape[1]
        x_pad = np.zeros((len(chunk), n_src, d), dtype=ad.DEFAULT_DTYPE)
        y_pad = np.zeros((len(chunk), n_steps * reduction_factor, ys[0].shape[1]),
                         dtype=ad.DEFAULT_DTYPE)
        for b, (x, y) in enumerate(zip(xs, ys)):
            x_pad[b, :x.shape[0]] = x
            y_pad[b, :y.shape[0]] = y
        batches.append(Batch(x_pad,
                             np.array([x.shape[0] for x in xs]),
                             y_pad,
                             np.array([y.shape[0] for y in ys])))
    return batches


_CONFIG_FIELDS = ("batch_size", "epochs", "reduction_factor", "sigma_g",
                  "lambda_ga", "lambda_cp", "lambda_stop", "stop_weight",
                  "warmup_steps", "base_lr_scale", "adam_beta1", "adam_beta2",
                  "adam_eps", "grad_clip", "checkpoint_every", "seed")
_MODEL_FIELDS = ("feature_dim", "hidden_dim", "attention_dim", "prenet_layers")
_NORM_FIELDS = ("src_mean", "src_std", "tar_mean", "tar_std")


def _f32(value) -> np.ndarray:
    # asarray keeps scalars rank-0 (ascontiguousarray would promote to 1-D)
    arr = np.asarray(value, dtype="<f4")
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


@dataclass
class Checkpoint:
    """Everything needed to resume or run the model; all tensors are stored
    float32-quantized so file round trips are bit-exact."""
    params: dict
    first: dict
    second: dict
    config: dict
    norm: dict
    step: int

    @classmethod
    def build(cls, theta: ParameterSet, state: OptimizerState,
              train_cfg: TrainingConfig, model_cfg: ModelConfig,
              norm: NormStats) -> "Checkpoint":
        config = {name: float(np.float32(getattr(train_cfg, name)))
                  for name in _CONFIG_FIELDS}
        for name in _MODEL_FIELDS:
            config[name] = float(np.float32(getattr(model_cfg, name)))
        return cls(params={n: _f32(t.data) for n, t in theta.items()},
                   first={n: _f32(v) for n, v in state.first.items()},
                   second={n: _f32(v) for n, v in state.second.items()},
                   config=config,
                   norm={n: _f32(getattr(norm, n)) for n in _NORM_FIELDS},
                   step=state.step)

    def to_parameter_set(self) -> ParameterSet:
        theta = ParameterSet()
        for name, value in self.params.items():
            theta.add(name, value.astype(ad.DEFAULT_DTYPE))
        return theta

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(feature_dim=int(self.config["feature_dim"]),
                           hidden_dim=int(self.config["hidden_dim"]),
                           attention_dim=int(self.config["attention_dim"]),
                           reduction_factor=int(self.config["reduction_factor"]),
                           prenet_layers=int(self.config["prenet_layers"]))

    def norm_stats(self) -> NormStats:
        return NormStats(*(self.norm[n].astype(float) for n in _NORM_FIELDS))

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(
            first={n: v.astype(ad.DEFAULT_DTYPE) for n, v in self.first.items()},
            second={n: v.astype(ad.DEFAULT_DTYPE) for n, v in self.second.items()},
            step=self.step)

    def _records(self):
        for name, value in self.params.items():
            yield name, value
        for name in self.params:
            yield f"{name}.m", self.first[name]
            yield f"{name}.v", self.second[name]
        for name, value in self.config.items():
            yield f"config.{name}", _f32(value)
        for name, value in self.norm.items():
            yield f"norm.{name}", value

    def save(self, path) -> None:
        records = list(self._records())
        out = bytearray()
        out += _CKPT_MAGIC
        out.append(_CKPT_VERSION)
        out += struct.pack("<I", len(records))
        for name, value in records:
            encoded = name.encode("utf-8")
            out += struct.pack("<H", len(encoded))
            out += encoded
            out.append(value.ndim)
            for dim in value.shape:
                out += struct.pack("<I", dim)
            out += value.astype("<f4").tobytes()
        out += struct.pack("<Q", self.step)
        Path(path).write_bytes(bytes(out))


def _take(blob: bytes, offset: int, size: int, path) -> tuple[bytes, int]:
    if offset + size > len(blob):
        raise FormatError(f"{path}: truncated at byte {len(blob)}, needed "
                          f"{offset + size}")
    return blob[offset:offset + size], offset + size


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0, expected {_CKPT_MAGIC!r}")
    if len(blob) < 5:
        raise FormatError(f"{path}: truncated at byte {len(blob)}, needed 5")
    if blob[4] != _CKPT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version "
                                      f"{blob[4]} at byte 4")
    raw, offset = _take(blob, 5, 4, path)
    (n_records,) = struct.unpack("<I", raw)
    params, first, second, config, norm = {}, {}, {}, {}, {}
    for _ in range(n_records):
        raw, offset = _take(blob, offset, 2, path)
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _take(blob, offset, name_len, path)
        name = raw.decode("utf-8")
        raw, offset = _take(blob, offset, 1, path)
        rank = raw[0]
        dims = []
        for _ in range(rank):
            raw, offset = _take(blob, offset, 4, path)
            dims.append(struct.unpack("<I", raw)[0])
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw, offset = _take(blob, offset, count * 4, path)
        value = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        if name.startswith("config."):
            if value.size != 1:
                raise FormatError(f"{path}: config record {name!r} is not scalar")
            config[name[len("config."):]] = float(value.reshape(()))
        elif name.startswith("norm."):
            norm[name[len("norm."):]] = value
        elif name.endswith(".m"):
            first[name[:-2]] = value
        elif name.endswith(".v"):
            second[name[:-2]] = value
        else:
            params[name] = value
    raw, offset = _take(blob, offset, 8, path)
    (step,) = struct.unpack("<Q", raw)
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} unexpected trailing bytes "
                          f"at byte {offset}")
    if not params:
        raise FormatError(f"{path}: no parameter records present")
    return Checkpoint(params, first, second, config, norm, step)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_lines: list
    aborted: bool
    epochs_run: int


def _epoch_log_line(epoch: int, means: dict, lr: float) -> str:
    cols = [str(epoch)] + [repr(means[k]) for k in
                           ("seq2seq", "guided_attention", "cp_source",
                            "cp_target", "stop", "total")] + [repr(lr)]
    return "\t".join(cols)


def train(pairs, model_cfg: ModelConfig, cfg: TrainingConfig,
          norm: NormStats | None = None, checkpoint_path=None,
          log_path=None) -> TrainResult:
    """Run the full optimization loop over already-normalized pairs.

    The returned checkpoint is the last completed epoch's state; on a
    non-finite loss the loop aborts and the previous epoch's checkpoint is
    retained (and written, when a path was given).
    """
    if not pairs:
        raise EmptyInputError("cannot train on an empty dataset")
    if cfg.reduction_factor != model_cfg.reduction_factor:
        raise ConfigError(f"training reduction_factor {cfg.reduction_factor} "
                          f"conflicts with model {model_cfg.reduction_factor}")
    if norm is None:
        norm = NormStats.identity(model_cfg.feature_dim)
    theta = init_parameters(model_cfg, seed=cfg.seed)
    state = OptimizerState.fresh(theta)
    weights = LossWeights(guided_attention=cfg.lambda_ga,
                          context_preservation=cfg.lambda_cp, stop=cfg.lambda_stop)
    ga_cfg = GuidedAttentionConfig(width=cfg.sigma_g)
    term_keys = ("seq2seq", "guided_attention", "cp_source", "cp_target",
                 "stop", "total")
    last_good = Checkpoint.build(theta, state, cfg, model_cfg, norm)
    log_lines: list = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            batches = make_batches(pairs, cfg.batch_size, cfg.seed + epoch - 1,
                                   cfg.reduction_factor)
            sums = dict.fromkeys(term_keys, 0.0)
            lr = 0.0
            try:
                for batch in batches:
                    theta.zero_grads()
                    out = forward_training_batch(batch.x, batch.source_lengths,
                                                 batch.y, batch.target_lengths,
                                                 theta, model_cfg)
                    breakdown = batch_loss_breakdown(
                        out, batch.x, batch.y, batch.source_lengths,
                        batch.target_lengths, weights, ga_cfg,
                        w_pos=cfg.stop_weight)
                    ad.backward(breakdown.total)
                    clip_gradients(theta, cfg.grad_clip)
                    lr = lr_at(state.step + 1, cfg)
                    adam_step(theta, state, lr, cfg)
                    for key, value in breakdown.values().items():
                        sums[key] += value
            except NumericalError:
                if checkpoint_path is not None:
                    last_good.save(checkpoint_path)
                return TrainResult(last_good, log_lines, aborted=True,
                                   epochs_run=epoch - 1)
            means = {k: sums[k] / len(batches) for k in term_keys}
            line = _epoch_log_line(epoch, means, lr)
            log_lines.append(line)
            if log_file is not None:
                log_file.write(line + "\n")
                log_file.flush()
            last_good = Checkpoint.build(theta, state, cfg, model_cfg, norm)
            if checkpoint_path is not None and (
                    epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
                last_good.save(checkpoint_path)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(last_good, log_lines, aborted=False, epochs_run=cfg.epochs)
