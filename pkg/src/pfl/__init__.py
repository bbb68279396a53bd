"""Progressive feature learning for long-tailed two-subset metric learning.

A small numpy implementation: two-stage cross-view/cross-cloth mapping heads,
Gaussian embeddings trained with uncertainty-aware triplet losses, a
progressive-aware batch sampler, two-phase training, rank-1 evaluation and
diagnostics, run on a synthetic gait-like benchmark.
"""

from .core_math import make_rng
from .errors import (AnalysisError, CheckpointError, ConfigError, InputError, NumericError, ParseError, PFLError,
                     SamplingError, ShapeError)
from .model import ModelConfig, ModelParams, init_params, inference_embed, load_checkpoint, save_checkpoint
from .sampling import BatchSpec, build_triplet_sets, sample_batch
from .synthbench import Dataset, SynthConfig, generate_benchmark, load_manifest, save_manifest
from .trainer import TrainConfig, train_baseline, train_phase1, train_phase2

__version__ = "0.1.0"

__all__ = [
    "AnalysisError", "BatchSpec", "CheckpointError", "ConfigError", "Dataset", "InputError", "ModelConfig",
    "ModelParams", "NumericError", "PFLError", "ParseError", "SamplingError", "ShapeError", "SynthConfig",
    "TrainConfig", "build_triplet_sets", "generate_benchmark", "inference_embed", "init_params",
    "load_checkpoint", "load_manifest", "make_rng", "sample_batch", "save_checkpoint", "save_manifest",
    "train_baseline", "train_phase1", "train_phase2",
]
