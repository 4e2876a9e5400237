"""Hyperparameter-optimisation frameworks for replay-based continual learning."""

__version__ = "0.1.0"
