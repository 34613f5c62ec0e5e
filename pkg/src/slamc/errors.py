"""Exception types shared across the package.

Everything raised on purpose by library code derives from SlamcError, so the
CLI can print the error class name plus message and exit nonzero without a
traceback.
"""


class SlamcError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SlamcError):
    """Invalid configuration, option value, or precondition violation."""


class FormatError(SlamcError):
    """Malformed input file; message names the offending row when known."""


class MissingTerm(SlamcError):
    """Term not present in a table provider running under the error policy."""


class DegenerateVector(SlamcError):
    """A vector that cannot be normalized (zero Euclidean norm)."""


class UnknownRegion(SlamcError):
    """Region code not part of the model's region set."""


class RegionPolicyError(SlamcError):
    """Region-conditioned model used at a mismatched geographic level
    without an explicit region-feature policy."""


class DivergenceError(SlamcError):
    """Training produced a non-finite loss or gradient."""


class VersionError(SlamcError):
    """Checkpoint written by a newer format version than this code supports."""
