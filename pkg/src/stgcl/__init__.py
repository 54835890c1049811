"""Multi-view spatial-temporal graph contrastive learning for skeletons."""

from .autodiff import Tape, Tensor, grad_check
from .rng import SplitMix64, derive_seed

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "grad_check", "SplitMix64", "derive_seed"]
