"""Sensitivity-aware finetuning for weight-noise robustness.

Measure how much each layer's output moves under injected weight noise,
freeze the layers that barely react, and run noise-injection training on the
rest.
"""

from .datasets import LabeledBatch, gen_blobs, load_idx
from .model import (
    LayerSpec,
    ModelGraph,
    build_model,
    conv,
    flatten,
    linear,
    load_checkpoint,
    relu,
    save_checkpoint,
    save_data,
)
from .noise import NoiseSpec, NoisyModel, perturb_weights, sample_noise, wrap_noisy
from .sensitivity import (
    FreezePlan,
    SensitivityReport,
    accumulate_stats,
    brute_force_oracle,
    compute_stats,
    kl_sensitivity,
    rank_agreement,
    select_top_k,
)
from .tensor import Tensor
from .trainer import (
    SaftRun,
    TrainConfig,
    TrainResult,
    evaluate,
    full_plan,
    noise_injection_train,
    saft_pipeline,
)

__all__ = [
    "FreezePlan",
    "LabeledBatch",
    "LayerSpec",
    "ModelGraph",
    "NoiseSpec",
    "NoisyModel",
    "SaftRun",
    "SensitivityReport",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "accumulate_stats",
    "brute_force_oracle",
    "build_model",
    "compute_stats",
    "conv",
    "evaluate",
    "flatten",
    "full_plan",
    "gen_blobs",
    "kl_sensitivity",
    "linear",
    "load_checkpoint",
    "load_idx",
    "noise_injection_train",
    "perturb_weights",
    "rank_agreement",
    "relu",
    "saft_pipeline",
    "sample_noise",
    "save_checkpoint",
    "save_data",
    "select_top_k",
    "wrap_noisy",
]

__version__ = "0.1.0"
