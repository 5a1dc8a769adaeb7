"""Quantized-training simulator with in-hindsight range estimation."""

__version__ = "0.1.0"
