"""Irony detection with a GRU baseline and multi-task transformer encoders, on a numpy autodiff core."""

__version__ = "0.1.0"
