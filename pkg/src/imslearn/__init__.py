"""Invariant, minimum-sufficient representation learning on tabular data.

The package trains small classifiers whose features stay predictive
under distribution shift. Three ingredients are combined in one loss:
environment-weighted risks with a gradient-alignment penalty, a
spectral entropy estimate of the learned features acting as a
compression term, and a soft clustering step that discovers the
environments when none are labeled. Kernel two-sample audits and
layerwise information profiles support the same workflow as
diagnostics.
"""

from .environments import EnvironmentAssignment, PartitionConfig, soft_kmeans
from .errors import ConfigError, DataError, ImsError, NumericalError
from .experiment import (
    LabeledDataset,
    MlpModel,
    SynthConfig,
    evaluate,
    gen_spurious,
    init_mlp,
    load_model,
    mi_profile,
    save_model,
    train,
)
from .infotheory import (
    audit_class_shift,
    conditional_mi,
    feature_entropy,
    median_bandwidth,
    mmd2_biased,
    mutual_information,
    permutation_bound,
    renyi_entropy,
)
from .objectives import TrainConfig, build_loss

__all__ = [
    "ConfigError",
    "DataError",
    "EnvironmentAssignment",
    "ImsError",
    "LabeledDataset",
    "MlpModel",
    "NumericalError",
    "PartitionConfig",
    "SynthConfig",
    "TrainConfig",
    "audit_class_shift",
    "build_loss",
    "conditional_mi",
    "evaluate",
    "feature_entropy",
    "gen_spurious",
    "init_mlp",
    "load_model",
    "median_bandwidth",
    "mi_profile",
    "mmd2_biased",
    "mutual_information",
    "permutation_bound",
    "renyi_entropy",
    "save_model",
    "soft_kmeans",
    "train",
]

__version__ = "0.1.0"
