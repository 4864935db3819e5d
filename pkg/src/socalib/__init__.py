"""Calibration-aware training and evaluation for classifiers that may
abstain: the Socrates loss family, classic baselines, calibration metrics,
post-hoc scalers, and a small deterministic experiment runner."""

__version__ = "0.1.0"
