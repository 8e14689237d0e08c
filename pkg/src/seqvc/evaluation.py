"""Objective evaluation: DTW-aligned distortion, mel-cepstral distortion,
attention diagonality, and duration-ratio recovery."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, EmptyInputError
from .inference import convert

_MCD_COEFF = 10.0 * math.sqrt(2.0) / math.log(10.0)


@dataclass
class DtwAlignment:
    path: list
    total_cost: float
    mean_cost: float


def dtw_align(a: np.ndarray, b: np.ndarray) -> DtwAlignment:
    """Dynamic time warp with steps {(1,0),(0,1),(1,1)} and frame-L1 cost.

    mean_cost is the summed path cost divided by path cells times feature
    dims, a per-element figure comparable across lengths.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] < 1 or b.shape[0] < 1:
        raise EmptyInputError(f"dtw needs non-empty 2-D sequences, got shapes "
                              f"{a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    n, m = a.shape[0], b.shape[0]
    cost = np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0 and acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if j > 0 and acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = cost[i, j] + best
    path = [(n - 1, m - 1)]
    i, j = n - 1, m - 1
    while i > 0 or j > 0:
        # predecessor preference mirrors the forward min: diagonal, up, left
        if i > 0 and j > 0:
            best_i, best_j, best = i - 1, j - 1, acc[i - 1, j - 1]
        else:
            best = np.inf
            best_i = best_j = 0
        if i > 0 and acc[i - 1, j] < best:
            best_i, best_j, best = i - 1, j, acc[i - 1, j]
        if j > 0 and acc[i, j - 1] < best:
            best_i, best_j, best = i, j - 1, acc[i, j - 1]
        i, j = best_i, best_j
        path.append((i, j))
    path.reverse()
    total = float(acc[n - 1, m - 1])
    return DtwAlignment(path, total, total / (len(path) * a.shape[1]))


def dtw_l1(a: np.ndarray, b: np.ndarray) -> float:
    return dtw_align(a, b).mean_cost


def mcd(a: np.ndarray, b: np.ndarray, mel_dims=None) -> float:
    """Mel-cepstral distortion in dB over a DTW alignment of the full frames.

    mel_dims selects the coefficient columns (default all, which suits the
    synthetic task; real mel-cepstra should exclude the energy coefficient).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    alignment = dtw_align(a, b)
    if mel_dims is None:
        mel_dims = range(a.shape[1])
    dims = np.asarray(list(mel_dims), dtype=int)
    if dims.size == 0:
        raise ConfigError("mcd needs at least one mel dimension")
    if dims.min() < 0 or dims.max() >= a.shape[1]:
        raise ConfigError(f"mel dims {dims.tolist()} out of range for "
                          f"{a.shape[1]} feature dims")
    idx = np.array(alignment.path)
    diffs = a[idx[:, 0]][:, dims] - b[idx[:, 1]][:, dims]
    return _MCD_COEFF * float(np.sqrt((diffs ** 2).sum(axis=1)).mean())


def diagonality_deviation(attention: np.ndarray) -> float:
    """Mean over decoder steps of |argmax_i / I - j / J'| with 1-based indices
    and argmax ties broken toward the smaller source frame."""
    a = np.asarray(attention, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise EmptyInputError(f"attention must be a non-empty matrix, "
                              f"got shape {a.shape}")
    n_source, n_steps = a.shape
    peaks = a.argmax(axis=0) + 1
    steps = np.arange(1, n_steps + 1)
    return float(np.abs(peaks / n_source - steps / n_steps).mean())


def duration_ratio_error(steps_taken: int, reduction_factor: int, n_source: int,
                         rho_true: float) -> float:
    """Relative error of generated length against the true warp ratio."""
    if not rho_true > 0:
        raise ConfigError(f"rho_true must be positive, got {rho_true}")
    if n_source < 1 or reduction_factor < 1 or steps_taken < 0:
        raise ConfigError("counts must be non-negative and sizes positive")
    return abs(steps_taken * reduction_factor / (rho_true * n_source) - 1.0)


@dataclass
class PairEval:
    dtw_l1: float
    mcd_db: float
    diagonality_deviation: float
    duration_ratio_error: float

    def values(self) -> dict:
        return {"dtw_l1": self.dtw_l1, "mcd_db": self.mcd_db,
                "diagonality_deviation": self.diagonality_deviation,
                "duration_ratio_error": self.duration_ratio_error}


@dataclass
class EvalReport:
    pairs: list = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    def aggregate(self) -> dict:
        if not self.pairs:
            raise EmptyInputError("no evaluated pairs to aggregate")
        keys = self.pairs[0].values().keys()
        return {k: float(np.mean([p.values()[k] for p in self.pairs])) for k in keys}


def evaluate_pair(x: np.ndarray, y: np.ndarray, ckpt, rho_true=None,
                  max_ratio: float = 3.0) -> PairEval:
    """Convert x and score it against the reference y."""
    if rho_true is None:
        rho_true = y.shape[0] / x.shape[0]
    result = convert(x, ckpt, max_ratio=max_ratio)
    return PairEval(
        dtw_l1=dtw_l1(result.y_hat, np.asarray(y, dtype=float)),
        mcd_db=mcd(result.y_hat, np.asarray(y, dtype=float)),
        diagonality_deviation=diagonality_deviation(result.attention),
        duration_ratio_error=duration_ratio_error(
            result.steps_taken, ckpt.to_model_config().reduction_factor,
            x.shape[0], rho_true),
    )


def evaluate_dataset(pairs, ckpt, rhos=None, max_ratio: float = 3.0) -> EvalReport:
    if not pairs:
        raise EmptyInputError("cannot evaluate an empty pair list")
    if rhos is not None and len(rhos) != len(pairs):
        raise DimensionError(f"{len(rhos)} warp factors for {len(pairs)} pairs")
    report = EvalReport()
    for k, (x, y) in enumerate(pairs):
        rho = None if rhos is None else float(rhos[k])
        report.pairs.append(evaluate_pair(x, y, ckpt, rho_true=rho,
                                          max_ratio=max_ratio))
    return report


def format_report(report: EvalReport) -> str:
    lines = []
    for k, pair in enumerate(report.pairs):
        lines.append(f"pair {k}:")
        lines.extend(f"{key}: {value!r}" for key, value in pair.values().items())
    lines.append("aggregate:")
    lines.append(f"pair_count: {report.n_pairs}")
    lines.extend(f"{key}: {value!r}" for key, value in report.aggregate().items())
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(format_report(report))
