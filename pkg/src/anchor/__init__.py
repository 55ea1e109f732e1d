"""Adversarial training with hard-positive-mined supervised contrastive learning."""
from anchor._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
