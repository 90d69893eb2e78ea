"""Crowd counting with an inverse-attention density network, on a small numpy autograd core."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigurationError,
    DataError,
    DimensionError,
    GraphError,
    IADCCNError,
    InventoryError,
    NumericError,
    ParseError,
)

__all__ = [
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "GraphError",
    "IADCCNError",
    "InventoryError",
    "NumericError",
    "ParseError",
    "__version__",
]
