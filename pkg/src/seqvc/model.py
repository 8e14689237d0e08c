"""Networks for attention-based sequence-to-sequence feature conversion.

Six components: source encoder, target encoder, additive attention, the
autoregressive target decoder, and two context-preservation decoders that
reconstruct the source from its embeddings and the target from the attention
context. Two forward paths are provided: a per-step single-pair path shared
verbatim with inference (so teacher-forced inference reproduces training
outputs exactly) and a batched path used by the optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor
from .errors import ConfigError, DimensionError, EmptyInputError


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 8
    hidden_dim: int = 64
    attention_dim: int = 64
    reduction_factor: int = 5
    prenet_layers: int = 1

    def __post_init__(self):
        for name in ("feature_dim", "hidden_dim", "attention_dim",
                     "reduction_factor", "prenet_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % 2 != 0:
            raise ConfigError(f"hidden_dim must be even for the bidirectional split, "
                              f"got {self.hidden_dim}")


@dataclass
class EncodedSource:
    embeddings: Tensor        # (frames, hidden_dim)
    source_mask: np.ndarray   # (frames,) bool


@dataclass
class EncodedTarget:
    embeddings: Tensor        # (decoder steps, hidden_dim)


@dataclass
class ForwardOutputs:
    """Everything the loss terms need, for one teacher-forced pair."""
    y_hat: Tensor             # (target frames, feature_dim)
    attention: Tensor         # (source frames, decoder steps), columns sum to 1
    stop_logits: Tensor       # (decoder steps,)
    source_recon: Tensor      # (source frames, feature_dim)
    target_recon: Tensor      # (target frames, feature_dim)
    seed: Tensor              # (decoder steps, hidden_dim) attention contexts


@dataclass
class BatchForwardOutputs:
    """Batched teacher-forced forward pass over padded sequences."""
    y_hat_full: Tensor        # (batch, steps*reduction, feature_dim), untrimmed
    attention: Tensor         # (batch, source frames, steps)
    stop_logits: Tensor       # (batch, steps)
    source_recon: Tensor      # (batch, source frames, feature_dim)
    target_recon_full: Tensor  # (batch, steps*reduction, feature_dim)
    seed: Tensor              # (batch, steps, hidden_dim)
    source_mask: np.ndarray   # (batch, source frames) bool
    frame_mask: np.ndarray    # (batch, steps*reduction) bool, valid target frames
    step_mask: np.ndarray     # (batch, steps) bool, valid decoder steps


def decoder_steps(n_frames: int, reduction_factor: int) -> int:
    return -(-n_frames // reduction_factor)


# ---------------------------------------------------------------------------
# parameter initialization

def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def _add_prenet(theta: ParameterSet, rng, prefix: str, d_in: int, cfg: ModelConfig) -> None:
    width = cfg.hidden_dim
    for layer in range(cfg.prenet_layers):
        d = d_in if layer == 0 else width
        theta.add(f"{prefix}{layer}.W", _glorot(rng, d, 2 * width))
        theta.add(f"{prefix}{layer}.b", np.zeros(2 * width))


def _add_gru(theta: ParameterSet, rng, prefix: str, d_in: int, hidden: int) -> None:
    theta.add(f"{prefix}Wx", _glorot(rng, d_in, 3 * hidden))
    theta.add(f"{prefix}Wh", _glorot(rng, hidden, 2 * hidden))
    theta.add(f"{prefix}Whc", _glorot(rng, hidden, hidden))
    bias = np.zeros(3 * hidden)
    bias[:hidden] = 1.0  # open the update gate early so gradients reach back in time
    theta.add(f"{prefix}b", bias)


def _add_linear(theta: ParameterSet, rng, prefix: str, d_in: int, d_out: int) -> None:
    theta.add(f"{prefix}W", _glorot(rng, d_in, d_out))
    theta.add(f"{prefix}b", np.zeros(d_out))


def init_parameters(cfg: ModelConfig, seed: int) -> ParameterSet:
    """Fresh parameters: uniform +-sqrt(6/(fan_in+fan_out)), zero biases,
    except recurrent update-gate biases start at +1."""
    rng = np.random.default_rng(seed)
    theta = ParameterSet()
    half = cfg.hidden_dim // 2

    _add_prenet(theta, rng, "src_enc.prenet", cfg.feature_dim, cfg)
    _add_gru(theta, rng, "src_enc.fwd.", cfg.hidden_dim, half)
    _add_gru(theta, rng, "src_enc.bwd.", cfg.hidden_dim, half)

    _add_prenet(theta, rng, "tar_enc.prenet", cfg.feature_dim, cfg)
    _add_gru(theta, rng, "tar_enc.rnn.", cfg.hidden_dim, cfg.hidden_dim)

    theta.add("attn.key.W", _glorot(rng, cfg.hidden_dim, cfg.attention_dim))
    theta.add("attn.key.b", np.zeros(cfg.attention_dim))
    theta.add("attn.query.W", _glorot(rng, cfg.hidden_dim, cfg.attention_dim))
    theta.add("attn.score.W", _glorot(rng, cfg.attention_dim, 1))

    _add_gru(theta, rng, "dec.rnn.", 2 * cfg.hidden_dim, cfg.hidden_dim)
    _add_linear(theta, rng, "dec.out.", cfg.hidden_dim,
                cfg.reduction_factor * cfg.feature_dim)
    _add_linear(theta, rng, "dec.stop.", cfg.hidden_dim, 1)

    for prefix in ("cp_src", "cp_tar"):
        _add_prenet(theta, rng, f"{prefix}.prenet", cfg.hidden_dim, cfg)
        _add_gru(theta, rng, f"{prefix}.fwd.", cfg.hidden_dim, half)
        _add_gru(theta, rng, f"{prefix}.bwd.", cfg.hidden_dim, half)
        _add_linear(theta, rng, f"{prefix}.out.", cfg.hidden_dim, cfg.feature_dim)
    return theta


# ---------------------------------------------------------------------------
# shared building blocks

def _prenet(theta: ParameterSet, prefix: str, x: Tensor, cfg: ModelConfig) -> Tensor:
    for layer in range(cfg.prenet_layers):
        x = ad.glu(ad.linear(x, theta[f"{prefix}{layer}.W"], theta[f"{prefix}{layer}.b"]))
    return x


def _gru_seq(theta: ParameterSet, prefix: str, x: Tensor, reverse: bool = False) -> Tensor:
    """Run a recurrent layer over a single (frames, d_in) sequence."""
    n, hidden = x.data.shape[0], theta[prefix + "Whc"].data.shape[0]
    gates = ad.linear(x, theta[prefix + "Wx"], theta[prefix + "b"])
    h = ad.zeros((1, hidden))
    states: list = [None] * n
    order = range(n - 1, -1, -1) if reverse else range(n)
    for t in order:
        h = ad.gru_step_pre(ad.narrow(gates, 0, t, 1), h,
                            theta[prefix + "Wh"], theta[prefix + "Whc"])
        states[t] = h
    return ad.concat(states, axis=0)


def _gru_seq_batch(theta: ParameterSet, prefix: str, x: Tensor,
                   reverse: bool = False, keep_mask: np.ndarray | None = None) -> Tensor:
    """Run a recurrent layer over (batch, frames, d_in).

    keep_mask holds the state through invalid frames; the reverse direction
    needs it so end-padding provably never reaches valid positions.
    """
    batch, n, _ = x.data.shape
    hidden = theta[prefix + "Whc"].data.shape[0]
    flat = ad.reshape(x, (batch * n, x.data.shape[2]))
    gates = ad.reshape(ad.linear(flat, theta[prefix + "Wx"], theta[prefix + "b"]),
                       (batch, n, 3 * hidden))
    h = ad.zeros((batch, hidden))
    states: list = [None] * n
    order = range(n - 1, -1, -1) if reverse else range(n)
    for t in order:
        g_t = ad.reshape(ad.narrow(gates, 1, t, 1), (batch, 3 * hidden))
        step = ad.gru_step_pre(g_t, h, theta[prefix + "Wh"], theta[prefix + "Whc"])
        if keep_mask is not None:
            m = ad.constant(keep_mask[:, t:t + 1].astype(x.data.dtype))
            step = ad.add(h, ad.mul(m, ad.sub(step, h)))
        h = step
        states[t] = h
    return ad.stack_steps(states, axis=1)


def _bidirectional(theta: ParameterSet, prefix: str, x: Tensor) -> Tensor:
    fwd = _gru_seq(theta, f"{prefix}.fwd.", x)
    bwd = _gru_seq(theta, f"{prefix}.bwd.", x, reverse=True)
    return ad.concat([fwd, bwd], axis=1)


def _bidirectional_batch(theta: ParameterSet, prefix: str, x: Tensor,
                         valid: np.ndarray) -> Tensor:
    fwd = _gru_seq_batch(theta, f"{prefix}.fwd.", x)
    bwd = _gru_seq_batch(theta, f"{prefix}.bwd.", x, reverse=True, keep_mask=valid)
    return ad.concat([fwd, bwd], axis=2)


def _check_features(x: np.ndarray, cfg: ModelConfig, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != cfg.feature_dim:
        raise DimensionError(f"{what} must be (frames, {cfg.feature_dim}), got {x.shape}")
    if x.shape[0] == 0:
        raise EmptyInputError(f"{what} has no frames")
    return x


def _representative_frames(y: np.ndarray, n_steps: int, r: int) -> np.ndarray:
    """Per-step encoder inputs: all-zero go frame, then the last frame of the
    preceding group, so step s only ever sees frames strictly before its own
    output group."""
    reps = np.zeros((n_steps, y.shape[-1]), dtype=y.dtype)
    for s in range(1, n_steps):
        reps[s] = y[s * r - 1]
    return reps


# ---------------------------------------------------------------------------
# single-pair operations (shared with inference)

def encode_source(x: np.ndarray, theta: ParameterSet, cfg: ModelConfig) -> EncodedSource:
    x = _check_features(x, cfg, "source sequence")
    hidden = _prenet(theta, "src_enc.prenet", ad.tensor(x), cfg)
    k = _bidirectional(theta, "src_enc", hidden)
    return EncodedSource(k, np.ones(x.shape[0], dtype=bool))


def encode_target(y: np.ndarray, theta: ParameterSet, cfg: ModelConfig) -> EncodedTarget:
    y = _check_features(y, cfg, "target sequence")
    n_steps = decoder_steps(y.shape[0], cfg.reduction_factor)
    reps = _representative_frames(y, n_steps, cfg.reduction_factor)
    hidden = _prenet(theta, "tar_enc.prenet", ad.tensor(reps), cfg)
    return EncodedTarget(_gru_seq(theta, "tar_enc.rnn.", hidden))


def attend(enc: EncodedSource, query: Tensor, theta: ParameterSet) -> tuple[Tensor, Tensor]:
    """Additive attention for one decoder step.

    Returns the attention column over source frames (frames, 1) and the
    context vector (1, hidden), a convex combination of source embeddings.
    """
    if enc.embeddings.data.shape[0] == 0:
        raise EmptyInputError("attend: empty source encoding")
    q = query if query.data.ndim == 2 else ad.reshape(query, (1, query.data.shape[-1]))
    keys = ad.linear(enc.embeddings, theta["attn.key.W"], theta["attn.key.b"])
    energies = ad.matmul(ad.tanh(ad.add(keys, ad.matmul(q, theta["attn.query.W"]))),
                         theta["attn.score.W"])
    weights = ad.softmax_masked(energies, enc.source_mask[:, None], axis=0)
    context = ad.matmul(ad.transpose(weights, (1, 0)), enc.embeddings)
    return weights, context


def decode_step(context: Tensor, query: Tensor, state: Tensor,
                theta: ParameterSet, cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor]:
    """One autoregressive decoder step: emit a group of reduction_factor
    frames plus a stop logit."""
    inputs = ad.concat([context, query], axis=1)
    new_state = ad.recurrent_step(inputs, state, theta, "dec.rnn.")
    group = ad.reshape(ad.linear(new_state, theta["dec.out.W"], theta["dec.out.b"]),
                       (cfg.reduction_factor, cfg.feature_dim))
    stop = ad.reshape(ad.linear(new_state, theta["dec.stop.W"], theta["dec.stop.b"]), (1,))
    return group, stop, new_state


def source_decode(k: Tensor, theta: ParameterSet, cfg: ModelConfig) -> Tensor:
    """Reconstruct source features from source embeddings, frame for frame."""
    hidden = _bidirectional(theta, "cp_src", _prenet(theta, "cp_src.prenet", k, cfg))
    return ad.linear(hidden, theta["cp_src.out.W"], theta["cp_src.out.b"])


def target_decode(seed: Tensor, theta: ParameterSet, cfg: ModelConfig,
                  n_frames: int | None = None) -> Tensor:
    """Reconstruct target features from the attention contexts, upsampled by
    the reduction factor and optionally trimmed to n_frames."""
    hidden = _bidirectional(theta, "cp_tar", _prenet(theta, "cp_tar.prenet", seed, cfg))
    frames = ad.repeat_steps(ad.linear(hidden, theta["cp_tar.out.W"], theta["cp_tar.out.b"]),
                             cfg.reduction_factor, axis=0)
    if n_frames is not None:
        frames = ad.narrow(frames, 0, 0, n_frames)
    return frames


def autoregressive_decode(theta: ParameterSet, cfg: ModelConfig, enc: EncodedSource,
                          next_frame, max_steps: int,
                          stop_threshold: float | None = None):
    """Run the target encoder, attention and decoder step by step.

    ``next_frame(step, prev_group)`` supplies the frame fed to the target
    encoder: ground truth during training, the previously generated frame
    during free-running inference. Returns (y_full, attention, stop_logits,
    seed, n_steps); y_full holds n_steps * reduction_factor frames.
    """
    enc_state = ad.zeros((1, cfg.hidden_dim))
    dec_state = ad.zeros((1, cfg.hidden_dim))
    prev_group: np.ndarray | None = None
    columns, contexts, groups, stops = [], [], [], []
    for step in range(max_steps):
        frame = np.asarray(next_frame(step, prev_group), dtype=ad.DEFAULT_DTYPE)
        fed = _prenet(theta, "tar_enc.prenet", ad.tensor(frame[None, :]), cfg)
        enc_state = ad.recurrent_step(fed, enc_state, theta, "tar_enc.rnn.")
        weights, context = attend(enc, enc_state, theta)
        group, stop, dec_state = decode_step(context, enc_state, dec_state, theta, cfg)
        columns.append(weights)
        contexts.append(context)
        groups.append(group)
        stops.append(stop)
        prev_group = group.data
        if stop_threshold is not None and _sigmoid_scalar(stop.data[0]) > stop_threshold:
            break
    y_full = ad.concat(groups, axis=0)
    attention = ad.concat(columns, axis=1)
    stop_logits = ad.concat(stops, axis=0)
    seed = ad.concat(contexts, axis=0)
    return y_full, attention, stop_logits, seed, len(groups)


def _sigmoid_scalar(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x)) if x >= 0 else math.exp(x) / (1.0 + math.exp(x))


def forward_training(x: np.ndarray, y: np.ndarray, theta: ParameterSet,
                     cfg: ModelConfig) -> ForwardOutputs:
    """Teacher-forced forward pass for one pair, per-step code path."""
    x = _check_features(x, cfg, "source sequence")
    y = _check_features(y, cfg, "target sequence")
    r = cfg.reduction_factor
    n_frames = y.shape[0]
    n_steps = decoder_steps(n_frames, r)
    enc = encode_source(x, theta, cfg)

    def teacher(step: int, _prev) -> np.ndarray:
        if step == 0:
            return np.zeros(cfg.feature_dim)
        return y[step * r - 1]

    y_full, attention, stop_logits, seed, _ = autoregressive_decode(
        theta, cfg, enc, teacher, max_steps=n_steps)
    return ForwardOutputs(
        y_hat=ad.narrow(y_full, 0, 0, n_frames),
        attention=attention,
        stop_logits=stop_logits,
        source_recon=source_decode(enc.embeddings, theta, cfg),
        target_recon=target_decode(seed, theta, cfg, n_frames=n_frames),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# batched path (training hot loop)

def batch_masks(source_lengths: np.ndarray, target_lengths: np.ndarray,
                n_src: int, n_steps: int, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean validity masks for a padded batch: source frames, target
    frames at full (untrimmed) resolution, and decoder steps."""
    src = np.arange(n_src)[None, :] < source_lengths[:, None]
    frame = np.arange(n_steps * r)[None, :] < target_lengths[:, None]
    step = np.arange(n_steps)[None, :] * r < target_lengths[:, None]
    return src, frame, step


def forward_training_batch(x: np.ndarray, source_lengths: np.ndarray,
                           y: np.ndarray, target_lengths: np.ndarray,
                           theta: ParameterSet, cfg: ModelConfig) -> BatchForwardOutputs:
    """Teacher-forced forward pass over a zero-padded batch.

    x: (batch, max source frames, D); y: (batch, steps*r, D) zero-padded to a
    multiple of the reduction factor. Padding provably does not influence any
    valid output position.
    """
    x = np.asarray(x, dtype=ad.DEFAULT_DTYPE)
    y = np.asarray(y, dtype=ad.DEFAULT_DTYPE)
    r = cfg.reduction_factor
    batch, n_src, _ = x.shape
    if y.shape[1] % r != 0:
        raise DimensionError(f"padded target length {y.shape[1]} is not a multiple of {r}")
    n_steps = y.shape[1] // r
    src_mask, frame_mask, step_mask = batch_masks(
        np.asarray(source_lengths), np.asarray(target_lengths), n_src, n_steps, r)

    src_hidden = _prenet(theta, "src_enc.prenet", ad.tensor(x), cfg)
    k = _bidirectional_batch(theta, "src_enc", src_hidden, src_mask)

    reps = np.zeros((batch, n_steps, cfg.feature_dim), dtype=y.dtype)
    if n_steps > 1:
        reps[:, 1:] = y[:, r - 1:(n_steps - 1) * r:r]
    q = _gru_seq_batch(theta, "tar_enc.rnn.",
                       _prenet(theta, "tar_enc.prenet", ad.tensor(reps), cfg))

    h = cfg.hidden_dim
    keys = ad.reshape(ad.linear(ad.reshape(k, (batch * n_src, h)),
                                theta["attn.key.W"], theta["attn.key.b"]),
                      (batch, n_src, 1, cfg.attention_dim))
    queries = ad.reshape(ad.matmul(ad.reshape(q, (batch * n_steps, h)),
                                   theta["attn.query.W"]),
                         (batch, 1, n_steps, cfg.attention_dim))
    energies = ad.reshape(
        ad.matmul(ad.reshape(ad.tanh(ad.add(keys, queries)),
                             (batch * n_src * n_steps, cfg.attention_dim)),
                  theta["attn.score.W"]),
        (batch, n_src, n_steps))
    attention = ad.softmax_masked(
        energies, np.broadcast_to(src_mask[:, :, None], energies.data.shape), axis=1)
    seed = ad.batched_matmul(ad.transpose(attention, (0, 2, 1)), k)

    dec_inputs = ad.concat([seed, q], axis=2)
    dec_states = _gru_seq_batch(theta, "dec.rnn.", dec_inputs)
    flat_states = ad.reshape(dec_states, (batch * n_steps, h))
    y_hat_full = ad.reshape(ad.linear(flat_states, theta["dec.out.W"], theta["dec.out.b"]),
                            (batch, n_steps * r, cfg.feature_dim))
    stop_logits = ad.reshape(ad.linear(flat_states, theta["dec.stop.W"], theta["dec.stop.b"]),
                             (batch, n_steps))

    src_recon_hidden = _bidirectional_batch(
        theta, "cp_src", _prenet(theta, "cp_src.prenet", k, cfg), src_mask)
    source_recon = ad.linear(src_recon_hidden, theta["cp_src.out.W"], theta["cp_src.out.b"])

    tar_recon_hidden = _bidirectional_batch(
        theta, "cp_tar", _prenet(theta, "cp_tar.prenet", seed, cfg), step_mask)
    target_recon_full = ad.repeat_steps(
        ad.linear(tar_recon_hidden, theta["cp_tar.out.W"], theta["cp_tar.out.b"]), r, axis=1)

    return BatchForwardOutputs(
        y_hat_full=y_hat_full,
        attention=attention,
        stop_logits=stop_logits,
        source_recon=source_recon,
        target_recon_full=target_recon_full,
        seed=seed,
        source_mask=src_mask,
        frame_mask=frame_mask,
        step_mask=step_mask,
    )
