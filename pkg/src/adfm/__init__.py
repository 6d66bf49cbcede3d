"""Adversarial filtering over long user-behavior sequences for CTR prediction."""

__version__ = "0.1.0"
