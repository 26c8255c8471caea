"""Thermal-image detector: numpy autodiff engine, multi-scale attention,
centralized feature pyramid neck, anchor-free heads and COCO-style metrics."""

__version__ = "0.1.0"

from . import kernels
from .errors import CrtError
from .tensor import Tensor, no_grad

__all__ = ["CrtError", "Tensor", "kernels", "no_grad", "__version__"]
