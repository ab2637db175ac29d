"""Sequence-transducer training with minimum Bayes risk fine-tuning."""

__version__ = "0.1.0"
