"""Self-explaining selective model for interpretable sequence classification."""

from .model import SESM, SesmConfig, gumbel_sigmoid

__all__ = ["SESM", "SesmConfig", "gumbel_sigmoid"]
__version__ = "0.1.0"
