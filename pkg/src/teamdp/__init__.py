"""Dynamic programming for centralized and decentralized multiple-access scheduling."""

from .model import ModelParams

__all__ = ["ModelParams"]
__version__ = "0.1.0"
