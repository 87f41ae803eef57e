"""Desk-scale joint-embedding predictive pretraining for video, on a small numpy autodiff engine."""

__version__ = "0.1.0"
