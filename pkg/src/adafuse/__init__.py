"""Adaptive multimodal fusion for persuasion prediction."""

__version__ = "0.1.0"
