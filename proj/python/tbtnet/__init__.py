"""Few-shot semantic segmentation on frozen ResNet feature pyramids.

Configuration values are passed as plain dicts keyed by the names in
``config_keys()``; anything not given keeps its default.
"""

from ._core import (
    ConfigError,
    LoadError,
    Model,
    SamplingError,
    ShapeError,
    TrainingError,
    combine_level_losses,
    config_keys,
    cosine_affinity,
    default_config,
    evaluate,
    extract_features,
    fold_classes,
    generate_synthetic,
    param_count,
    resolve_config,
    train,
    validate_config,
    write_test_manifest,
)

__all__ = [
    "ConfigError",
    "LoadError",
    "Model",
    "SamplingError",
    "ShapeError",
    "TrainingError",
    "combine_level_losses",
    "config_keys",
    "cosine_affinity",
    "default_config",
    "evaluate",
    "extract_features",
    "fold_classes",
    "generate_synthetic",
    "param_count",
    "resolve_config",
    "train",
    "validate_config",
    "write_test_manifest",
]

__version__ = "0.1.0"
