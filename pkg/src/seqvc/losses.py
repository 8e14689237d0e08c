"""Loss terms: sequence L1, guided attention, context preservation, stop.

All L1-style terms use the per-element mean over valid entries so magnitudes
stay comparable across sequence lengths and batch sizes. The guided-attention
penalty uses 1-based indices normalized by each sequence's own length, built
at decoder-step resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, NumericalError
from .model import BatchForwardOutputs, decoder_steps


@dataclass(frozen=True)
class GuidedAttentionConfig:
    width: float = 0.4  # diagonal band width, dimensionless

    def __post_init__(self):
        if not self.width > 0:
            raise ConfigError(f"guided attention width must be positive, got {self.width}")


@dataclass(frozen=True)
class LossWeights:
    guided_attention: float = 10000.0
    context_preservation: float = 10.0
    stop: float = 1.0

    def __post_init__(self):
        for name in ("guided_attention", "context_preservation", "stop"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")


@dataclass
class LossBreakdown:
    seq2seq: Tensor
    guided_attention: Tensor
    cp_source: Tensor
    cp_target: Tensor
    stop: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name).item()
                for name in ("seq2seq", "guided_attention", "cp_source",
                             "cp_target", "stop", "total")}


def band_penalty(delta, width: float):
    """Penalty for a normalized diagonal offset: 1 - exp(-delta^2 / (2 width^2)).

    Scalar or array `delta`; zero on the diagonal, saturating toward 1 as the
    offset leaves the band.
    """
    if not width > 0:
        raise ConfigError(f"penalty width must be positive, got {width}")
    return 1.0 - np.exp(-(np.asarray(delta, dtype=float) ** 2) / (2.0 * width ** 2))


def penalty_matrix(n_source: int, n_steps: int, width: float) -> np.ndarray:
    """Diagonal-band penalty: entry (i, j) grows with |i/I - j/J'|, 1-based."""
    if n_source < 1 or n_steps < 1:
        raise ConfigError(f"penalty_matrix needs positive sizes, got {n_source}x{n_steps}")
    i = np.arange(1, n_source + 1)[:, None] / n_source
    j = np.arange(1, n_steps + 1)[None, :] / n_steps
    return band_penalty(i - j, width)


def penalty_batch(source_lengths: np.ndarray, target_lengths: np.ndarray,
                  n_source: int, n_steps: int, r: int, width: float) -> np.ndarray:
    """Per-pair penalties in one (batch, n_source, n_steps) array, zero at
    padded cells; normalization uses each pair's own lengths."""
    out = np.zeros((len(source_lengths), n_source, n_steps))
    for b, (src, tar) in enumerate(zip(source_lengths, target_lengths)):
        steps = decoder_steps(int(tar), r)
        out[b, :src, :steps] = penalty_matrix(int(src), steps, width)
    return out


def guided_attention_loss(attention: Tensor, penalty: np.ndarray,
                          mask: np.ndarray | None = None) -> Tensor:
    if attention.data.shape != penalty.shape:
        raise DimensionError(f"attention shape {attention.data.shape} does not match "
                             f"penalty shape {penalty.shape}")
    if mask is None:
        mask = np.ones(penalty.shape, dtype=bool)
    return ad.masked_mean(ad.mul(attention, ad.constant(penalty)), mask)


def seq2seq_loss(y_hat: Tensor, y: Tensor, mask: np.ndarray) -> Tensor:
    return ad.l1_masked(y_hat, y, mask)


def context_preservation_loss(source_recon: Tensor, source: Tensor,
                              target_recon: Tensor, target: Tensor,
                              source_mask: np.ndarray,
                              target_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    return (ad.l1_masked(source_recon, source, source_mask),
            ad.l1_masked(target_recon, target, target_mask))


def stop_token_loss(logits: Tensor, final_step: int, w_pos: float = 5.0) -> Tensor:
    """Weighted BCE over decoder steps: target 1 from the final step on."""
    n_steps = logits.data.shape[-1]
    if not 0 <= final_step < n_steps:
        raise IndexError(f"final_step {final_step} out of range for {n_steps} steps")
    targets = (np.arange(n_steps) >= final_step).astype(float)
    weights = np.where(targets > 0, w_pos, 1.0)
    return ad.weighted_bce_mean(logits, targets, weights, denom=float(n_steps))


def stop_token_loss_batch(logits: Tensor, step_mask: np.ndarray,
                          stop_index: np.ndarray | None = None,
                          w_pos: float = 5.0) -> Tensor:
    """Batched stop loss: per pair, target 1 at valid steps >= its stop index
    (default: the last valid step); padded steps carry zero weight; mean over
    all valid steps."""
    if logits.data.shape != step_mask.shape:
        raise DimensionError(f"stop logits {logits.data.shape} do not match "
                             f"step mask {step_mask.shape}")
    steps = step_mask.sum(axis=1)
    if (steps == 0).any():
        raise DimensionError("every pair needs at least one valid decoder step")
    if stop_index is None:
        stop_index = steps - 1
    stop_index = np.asarray(stop_index)
    if ((stop_index < 0) | (stop_index >= steps)).any():
        raise IndexError(f"stop indices {stop_index} out of range for "
                         f"step counts {steps}")
    idx = np.arange(step_mask.shape[1])[None, :]
    targets = ((idx >= stop_index[:, None]) & step_mask).astype(float)
    weights = np.where(targets > 0, w_pos, 1.0) * step_mask
    return ad.weighted_bce_mean(logits, targets, weights, denom=float(step_mask.sum()))


def total_loss(seq2seq: Tensor, guided_attention: Tensor, cp_source: Tensor,
               cp_target: Tensor, stop: Tensor, weights: LossWeights) -> LossBreakdown:
    parts = {"seq2seq": seq2seq, "guided_attention": guided_attention,
             "cp_source": cp_source, "cp_target": cp_target, "stop": stop}
    for name, part in parts.items():
        if not math.isfinite(part.item()):
            raise NumericalError(f"loss term {name} is non-finite")
    total = ad.add(seq2seq, ad.scale(guided_attention, weights.guided_attention))
    total = ad.add(total, ad.scale(ad.add(cp_source, cp_target),
                                   weights.context_preservation))
    total = ad.add(total, ad.scale(stop, weights.stop))
    return LossBreakdown(seq2seq=seq2seq, guided_attention=guided_attention,
                         cp_source=cp_source, cp_target=cp_target, stop=stop,
                         total=total)


def batch_loss_breakdown(out: BatchForwardOutputs, x: np.ndarray, y: np.ndarray,
                         source_lengths: np.ndarray, target_lengths: np.ndarray,
                         weights: LossWeights, ga: GuidedAttentionConfig,
                         w_pos: float = 5.0) -> LossBreakdown:
    """Compose every loss term from one batched forward pass.

    x, y are the zero-padded inputs that produced ``out``; y at full
    (steps * reduction) resolution.
    """
    batch, n_source, n_steps = out.attention.data.shape
    r = out.y_hat_full.data.shape[1] // n_steps
    seq2seq = ad.l1_masked(out.y_hat_full, ad.constant(y), out.frame_mask)
    penalty = penalty_batch(source_lengths, target_lengths, n_source, n_steps, r, ga.width)
    cells = out.source_mask[:, :, None] & out.step_mask[:, None, :]
    guided = guided_attention_loss(out.attention, penalty, cells)
    cp_source, cp_target = context_preservation_loss(
        out.source_recon, ad.constant(x), out.target_recon_full, ad.constant(y),
        out.source_mask, out.frame_mask)
    # the stop region opens at the group whose end is the multiple of r
    # nearest the true length, so natural stopping lands on the closest
    # reachable duration rather than always rounding up
    nearest = np.maximum(1, np.rint(np.asarray(target_lengths) / r)).astype(int)
    stop = stop_token_loss_batch(out.stop_logits, out.step_mask,
                                 stop_index=nearest - 1, w_pos=w_pos)
    return total_loss(seq2seq, guided, cp_source, cp_target, stop, weights)
