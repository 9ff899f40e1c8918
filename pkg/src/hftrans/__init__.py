"""Hybrid-fusion transformer for multisequence 3D volume segmentation.

A from-scratch numpy tensor engine with reverse-mode autodiff, the
hybrid-fusion encoder/transformer/decoder model on top of it, soft-Dice and
surface-distance evaluation, a synthetic multimodal phantom generator, and a
training/ablation harness with a command-line front end.
"""

__version__ = "0.1.0"

from . import autodiff, gradcheck, model, losses, metrics, data, harness

__all__ = [
    "autodiff",
    "gradcheck",
    "model",
    "losses",
    "metrics",
    "data",
    "harness",
    "__version__",
]
