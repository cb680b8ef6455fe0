"""Federated learning with client-specific batch normalization and test-time
re-estimation of BN statistics, plus the two-layer NTK analysis tools."""

__version__ = "0.1.0"

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .datagen import Dataset, make_feature_shift_suite, make_teacher, make_unseen_spec, sample_client_dataset
from .fedtest import ReestimationConfig, test_external, test_external_frozen, test_internal
from .fl import AggregationConfig, FederatedRun, InvariantViolation, run_federated_training
from .nn import Network, TwoLayerBNModel, build_mlp, two_layer_init

__all__ = [
    "AggregationConfig", "ConfigError", "Dataset", "ExperimentConfig", "FederatedRun", "InvariantViolation",
    "Network", "ReestimationConfig", "TwoLayerBNModel", "build_mlp", "load_config", "make_feature_shift_suite",
    "make_teacher", "make_unseen_spec", "parse_config", "run_federated_training", "sample_client_dataset",
    "test_external", "test_external_frozen", "test_internal", "two_layer_init",
]
