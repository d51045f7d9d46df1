"""Logit-based knowledge distillation (KD, DKD, AEKT) over a small autodiff engine."""

__version__ = "0.1.0"
