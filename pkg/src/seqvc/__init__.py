"""Attention-based sequence-to-sequence feature conversion.

Converts variable-length source feature sequences into target sequences of a
different length with an attention-coupled encoder/decoder, trained with
guided-attention and context-preservation losses.
"""

from .data import (NormStats, SyntheticTaskConfig, compute_norm, gen_synthetic,
                   read_features, write_dataset, write_features)
from .errors import (ConfigError, DimensionError, EmptyInputError, FormatError,
                     InvalidMaskError, NumericalError, StaleGraphError,
                     UnsupportedVersionError)
from .evaluation import (diagonality_deviation, dtw_align, dtw_l1,
                         duration_ratio_error, evaluate_dataset, evaluate_pair,
                         mcd)
from .inference import DecodeResult, convert, export_attention
from .losses import GuidedAttentionConfig, LossWeights, penalty_matrix
from .model import ModelConfig, forward_training, init_parameters
from .training import (Checkpoint, TrainingConfig, load_checkpoint,
                       make_batches, train)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "DecodeResult", "DimensionError",
    "EmptyInputError", "FormatError", "GuidedAttentionConfig",
    "InvalidMaskError", "LossWeights", "ModelConfig", "NormStats",
    "NumericalError", "StaleGraphError", "SyntheticTaskConfig",
    "TrainingConfig", "UnsupportedVersionError", "compute_norm", "convert",
    "diagonality_deviation", "dtw_align", "dtw_l1", "duration_ratio_error",
    "evaluate_dataset", "evaluate_pair", "export_attention",
    "forward_training", "gen_synthetic", "init_parameters", "load_checkpoint",
    "make_batches", "mcd", "penalty_matrix", "read_features", "train",
    "write_dataset", "write_features",
]
