"""Stimuli-sensitive Hawkes processes: simulate, fit, predict and cluster activity sequences."""

__version__ = "0.1.0"
