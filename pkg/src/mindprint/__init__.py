"""Psycholinguistic fingerprints of community membership in comment corpora."""

from .errors import ConfigError, DataError, MindprintError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "MindprintError", "__version__"]
