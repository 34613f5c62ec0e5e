"""slamc: search-log compression and constrained nowcasting.

The library turns raw (period, region, category, term, count) query logs
into fixed-length unit-sphere embeddings plus a volume per cell, fits a
bounded probability network with learned positive multipliers on top, and
scores individual terms through the same network for interpretability.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DegenerateVector, DivergenceError,
                     FormatError, MissingTerm, RegionPolicyError, SlamcError,
                     UnknownRegion, VersionError)

__all__ = [
    "ConfigError", "DegenerateVector", "DivergenceError", "FormatError",
    "MissingTerm", "RegionPolicyError", "SlamcError", "UnknownRegion",
    "VersionError", "__version__",
]
