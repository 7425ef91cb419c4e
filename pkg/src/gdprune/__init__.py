"""Gradient-decay filter pruning with adaptive distillation for a toy learned video codec."""

__version__ = "0.1.0"
