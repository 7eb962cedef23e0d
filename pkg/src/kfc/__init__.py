"""Koopman forward model, symmetry-based state augmentation and a small CQL learner."""

__version__ = "0.1.0"
