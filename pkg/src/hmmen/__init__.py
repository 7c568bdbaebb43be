"""RGB+IR transmission-line segmentation with mutual cross-modal enhancement
and deformable feature alignment."""

from .errors import ContractViolation, DataError, NumericError
from .network import VARIANTS, Model

__all__ = ["ContractViolation", "DataError", "NumericError", "Model", "VARIANTS"]
__version__ = "0.1.0"
