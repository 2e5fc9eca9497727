"""Open-vocabulary region retrieval with query-generated detectors."""

from qarcnn.errors import QarError, FormatError

__version__ = "0.1.0"

__all__ = ["QarError", "FormatError", "__version__"]
