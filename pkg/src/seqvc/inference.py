"""Autoregressive conversion: run the trained model on a source sequence and
let the stop head decide the output length.

The decode loop is the same code path as teacher-forced training; the only
difference is where the next target-encoder input frame comes from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import apply_norm, invert_norm
from .errors import ConfigError, EmptyInputError
from .model import (_sigmoid_scalar, autoregressive_decode, decoder_steps,
                    encode_source)
from .training import Checkpoint


@dataclass
class DecodeResult:
    """Converted sequence plus decode diagnostics.

    y_hat has steps_taken * reduction_factor frames (no trim at the stop
    step); attention is source-frames by decoder-steps.
    """
    y_hat: np.ndarray
    attention: np.ndarray
    stop_logits: np.ndarray
    steps_taken: int
    stopped_naturally: bool


def convert(x: np.ndarray, ckpt: Checkpoint, max_ratio: float = 3.0,
            stop_threshold: float = 0.5, teacher_targets=None) -> DecodeResult:
    """Convert a raw-space source sequence with a trained checkpoint.

    Decoding stops when the stop head fires or after ceil(max_ratio * I / r)
    steps, whichever comes first. Supplying teacher_targets replaces the
    generated feedback frames with ground truth and fixes the step count,
    which reproduces the training forward pass exactly.
    """
    if not max_ratio > 0:
        raise ConfigError(f"max_ratio must be positive, got {max_ratio}")
    if not 0.0 < stop_threshold < 1.0:
        raise ConfigError(f"stop_threshold must lie in (0, 1), got {stop_threshold}")
    cfg = ckpt.to_model_config()
    theta = ckpt.to_parameter_set()
    stats = ckpt.norm_stats()
    x = np.asarray(x, dtype=ad.DEFAULT_DTYPE)
    if x.ndim != 2 or x.shape[0] < 1:
        raise EmptyInputError(f"source sequence must be non-empty 2-D, "
                              f"got shape {x.shape}")
    x_norm = apply_norm(x, stats.src_mean, stats.src_std)
    r = cfg.reduction_factor
    cap = math.ceil(max_ratio * x.shape[0] / r)

    if teacher_targets is None:
        def feeder(step: int, prev_group):
            if step == 0:
                return np.zeros(cfg.feature_dim)
            return prev_group[-1]
        max_steps, threshold = cap, stop_threshold
    else:
        y_norm = apply_norm(np.asarray(teacher_targets, dtype=ad.DEFAULT_DTYPE),
                            stats.tar_mean, stats.tar_std)

        def feeder(step: int, prev_group):
            if step == 0:
                return np.zeros(cfg.feature_dim)
            return y_norm[step * r - 1]
        max_steps, threshold = decoder_steps(y_norm.shape[0], r), None

    with ad.no_grad():
        enc = encode_source(x_norm, theta, cfg)
        y_full, attention, stop_logits, _, n_steps = autoregressive_decode(
            theta, cfg, enc, feeder, max_steps=max_steps, stop_threshold=threshold)

    stops = stop_logits.data.copy()
    natural = bool(stops.size and _sigmoid_scalar(float(stops[-1])) > stop_threshold)
    return DecodeResult(
        y_hat=invert_norm(y_full.data, stats.tar_mean, stats.tar_std),
        attention=attention.data.copy(),
        stop_logits=stops,
        steps_taken=n_steps,
        stopped_naturally=natural if teacher_targets is None else True,
    )


def export_attention(attention: np.ndarray, path, fmt: str = "pgm") -> None:
    """Write an attention matrix as a max-normalized 8-bit PGM image or a
    full-precision CSV; rows correspond to source frames either way."""
    a = np.asarray(attention, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise EmptyInputError(f"attention must be a non-empty matrix, "
                              f"got shape {a.shape}")
    if fmt == "pgm":
        peak = a.max()
        pixels = (np.rint(255.0 * a / peak) if peak > 0
                  else np.zeros_like(a)).astype(np.uint8)
        height, width = a.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())
    elif fmt == "csv":
        lines = [",".join(repr(v) for v in row) + "\n" for row in a.tolist()]
        Path(path).write_text("".join(lines))
    else:
        raise ConfigError(f"unknown attention export format {fmt!r}, "
                          "expected 'pgm' or 'csv'")


def read_attention_csv(path) -> np.ndarray:
    rows = [[float(v) for v in line.split(",")]
            for line in Path(path).read_text().splitlines() if line]
    return np.array(rows)
