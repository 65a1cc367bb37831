"""Compute-matched comparison of NLL, logit distillation and hidden-layer distillation."""

__version__ = "0.1.0"
