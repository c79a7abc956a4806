"""Imminent power-grid fault detection from weather and power-quality
features, with coefficient-based and Integrated Gradients explanations."""

__version__ = "0.1.0"

from .dataio import SCHEMA, Dataset, FeatureSchema, NormStats, load_csv  # noqa: E402,F401
