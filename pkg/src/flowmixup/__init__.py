"""Flow-Mixup regularization for multi-label classification, with ERM,
Mixup and Manifold Mixup baselines, label corruption and diagnostics."""
from .data import CorruptionSpec, Dataset, corrupt_labels, generate_synthetic, load_dataset, save_dataset, split
from .errors import ConfigError, DimensionError, NumericError, ParseError, StateError
from .estimator import FlowMixupClassifier
from .metrics import (auc, cluster_stats, independent_ratio, kmeans, macro_f1, performance_ratio,
                      r2_ratio, r_squared, variance_of_indicator)
from .mixing import MixingModule, MixSpec, mix_pair, sample_p
from .network import BlockSpec, NetworkPlan, build
from .training import Adam, PlateauScheduler, TrainConfig, train, weighted_bce

__version__ = "0.1.0"
