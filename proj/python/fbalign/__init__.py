"""Convolutional networks trained with backprop, feedback alignment and
sign-symmetric feedback."""

from ._core import (
    ConfigError,
    DataUnavailable,
    Feedback,
    FormatError,
    Network,
    NumericError,
    ShapeError,
    alignment_angles,
    architectures,
    conv2d,
    gradients,
    load_checkpoint,
    ratio_profile,
    resume,
    strategies,
    train,
    validate_config,
)

__all__ = [
    "ConfigError",
    "DataUnavailable",
    "Feedback",
    "FormatError",
    "Network",
    "NumericError",
    "ShapeError",
    "alignment_angles",
    "architectures",
    "conv2d",
    "gradients",
    "load_checkpoint",
    "ratio_profile",
    "resume",
    "strategies",
    "train",
    "validate_config",
]
