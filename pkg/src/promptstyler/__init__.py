"""Diverse style word vectors for a frozen text encoder, and a classifier trained on them.

Typical use goes through :mod:`promptstyler.harness` (or the ``promptstyler``
command); the building blocks live in ``encoder``, ``styles``,
``classifier`` and ``world``.
"""

from .classifier import ClassifierConfig, LinearClassifier, classify, train_classifier, zero_shot_classifier
from .encoder import Arch, Vocabulary, identity_encoder, init_encoder
from .harness import ExperimentConfig, run_ablation_grid, run_experiment, run_sweep
from .styles import InitDistribution, StyleBank, TrainConfig, learn_styles, learn_styles_parallel
from .world import WorldSpec

__version__ = "0.1.0"
