"""Adversarially robust few-shot meta-learning on a small reverse-mode autodiff engine."""

__version__ = "0.1.0"
