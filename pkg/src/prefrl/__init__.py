"""Preference-based reward learning that also learns from unlabeled trajectories.

The reward model is fit on labelled trajectory pairs (Bradley-Terry
cross-entropy) plus two terms that need no labels: a triplet loss that pulls
unlabeled segments toward preferred ones, and a regression of embedding
distances onto action distances within recent trajectories.
"""
from ._accel import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
