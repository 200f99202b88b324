"""Few-shot classification with diffusion-refined class prototypes.

A small transformer denoiser is meta-trained to turn averaged ("vanilla")
class prototypes into per-task adapted prototypes through a diffusion
process; episodic evaluation compares the refined classifier against the
plain prototype baseline.
"""

__version__ = "0.1.0"

from .data import EmbeddingDataset, Episode, SyntheticConfig, generate_synthetic, load_embeddings, sample_episode, save_embeddings, synthetic_split
from .denoiser import DenoiserConfig, DenoiserModel, init_identity
from .diffusion import DiffusionTrace, NoiseSchedule, SamplerConfig, ddim_timesteps, linear_schedule, sample_prototypes
from .estimators import DiffusionPrototypeClassifier, DiffusionPrototypeMetaLearner, PrototypeClassifier
from .harness import AblationSpec, EvalReport, export_report, meta_test, run_ablation, run_baseline
from .numerics import RngStream, Tape, Tensor
from .overfit import OverfitCache, OverfitConfig, OverfitResult, overfit_prototypes
from .protonet import Metric, PrototypeSet, classify, cross_entropy, evaluate_accuracy, vanilla_prototypes
from .training import TrainConfig, TrainState, load_checkpoint, meta_train, save_checkpoint

__all__ = [
    "__version__",
    "EmbeddingDataset", "Episode", "SyntheticConfig", "generate_synthetic",
    "load_embeddings", "sample_episode", "save_embeddings", "synthetic_split",
    "DenoiserConfig", "DenoiserModel", "init_identity",
    "DiffusionTrace", "NoiseSchedule", "SamplerConfig", "ddim_timesteps",
    "linear_schedule", "sample_prototypes",
    "DiffusionPrototypeClassifier", "DiffusionPrototypeMetaLearner", "PrototypeClassifier",
    "AblationSpec", "EvalReport", "export_report", "meta_test", "run_ablation", "run_baseline",
    "RngStream", "Tape", "Tensor",
    "OverfitCache", "OverfitConfig", "OverfitResult", "overfit_prototypes",
    "Metric", "PrototypeSet", "classify", "cross_entropy", "evaluate_accuracy", "vanilla_prototypes",
    "TrainConfig", "TrainState", "load_checkpoint", "meta_train", "save_checkpoint",
]
