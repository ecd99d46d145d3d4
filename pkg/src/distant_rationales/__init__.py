"""Rationale-supervised text classification on gradient salience.

Distant rationales come from a polarity lexicon. Auxiliary losses shape the
per-word input-gradient salience of a small convolutional classifier.
"""

from .corpus import Instance, Lexicon, SyntheticConfig, annotate, generate_synthetic
from .estimator import LexiconAnnotator, RationaleCNN
from .experiments import ExperimentSpec, compare, perturbation_sweep, run_matrix, welch_test
from .losses import METHODS, ConfigError
from .model import ModelConfig, TextCNN, Vocabulary
from .salience import word_gradients
from .trainer import RunRecord, TrainConfig, train_run

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExperimentSpec",
    "Instance",
    "Lexicon",
    "LexiconAnnotator",
    "METHODS",
    "ModelConfig",
    "RationaleCNN",
    "RunRecord",
    "SyntheticConfig",
    "TextCNN",
    "TrainConfig",
    "Vocabulary",
    "annotate",
    "compare",
    "generate_synthetic",
    "perturbation_sweep",
    "run_matrix",
    "train_run",
    "welch_test",
    "word_gradients",
]
