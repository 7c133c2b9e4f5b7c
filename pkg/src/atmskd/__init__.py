"""Adaptive-temperature, mixed-sample knowledge distillation on a numpy autodiff engine."""

__version__ = "0.1.0"
