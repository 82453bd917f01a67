"""Multi-temporal land-cover mapping with kernel classifiers and spatio-temporal MRFs."""

from stmrf.core import (
    DEFAULT_CLASSES,
    ClassSet,
    argmax_labels,
    check_labels,
    check_probabilities,
    prob_to_energy,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_CLASSES",
    "ClassSet",
    "argmax_labels",
    "check_labels",
    "check_probabilities",
    "prob_to_energy",
]
