"""Two-domain implicit-feedback recommendation with group-fairness-aware
training, top-K evaluation, and transport-based bound verification."""

from .data import (
    CrossDomainDataset,
    SplitDataset,
    SynthConfig,
    generate_synthetic,
    load_attributes,
    load_dataset,
    load_interactions,
    split_per_user,
)
from .backbone import Backbone, init, load_snapshot, save_snapshot
from .sampler import GroupLossTracker, SamplerConfig, temperature
from .gain import EpochSnapshot, GainEstimator, GainReport, estimate_gain
from .trainer import Adam, TrainConfig, TrainedModel, bpr_loss, train
from .metrics import EvaluationReport, evaluate, ndcg_at_k, paired_ttest, recall_at_k, ugf
from .theory import (
    BoundReport,
    EmbeddingCloud,
    deviation_bound,
    lipschitz_estimate,
    preservation_check,
    rademacher_estimate,
    theorem1_bound,
    wasserstein1,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Backbone",
    "BoundReport",
    "CrossDomainDataset",
    "EmbeddingCloud",
    "EpochSnapshot",
    "EvaluationReport",
    "GainEstimator",
    "GainReport",
    "GroupLossTracker",
    "SamplerConfig",
    "SplitDataset",
    "SynthConfig",
    "TrainConfig",
    "TrainedModel",
    "bpr_loss",
    "deviation_bound",
    "estimate_gain",
    "evaluate",
    "generate_synthetic",
    "init",
    "lipschitz_estimate",
    "load_attributes",
    "load_dataset",
    "load_interactions",
    "load_snapshot",
    "ndcg_at_k",
    "paired_ttest",
    "preservation_check",
    "rademacher_estimate",
    "recall_at_k",
    "save_snapshot",
    "split_per_user",
    "temperature",
    "theorem1_bound",
    "train",
    "ugf",
    "wasserstein1",
]
