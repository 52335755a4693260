"""Exception types shared across the package.

Everything raised on purpose derives from DslamError so callers can catch
one base class at the CLI boundary and map it to an exit code.
"""


class DslamError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DslamError):
    """Malformed configuration: unknown key, bad type, or out-of-range value."""


class InvalidDepthError(DslamError, ValueError):
    """An inverse depth or depth value outside its valid domain."""


class BehindCameraError(DslamError, ValueError):
    """A point with camera-frame depth at or below the minimum was projected."""


class NoStaticRegion(DslamError):
    """Patch sampling could not find enough eligible pixels.

    Attributes
    ----------
    available : int
        Number of eligible pixels that were found.
    """

    def __init__(self, available, requested):
        self.available = int(available)
        self.requested = int(requested)
        super().__init__(
            f"only {available} eligible pixels for {requested} patches"
        )


class ProviderLookupError(DslamError, LookupError):
    """A file-backed provider was asked for data the directory does not hold."""


class RasterFormatError(DslamError):
    """A raster file had a bad magic, header, or payload size."""


class InsufficientSamples(DslamError):
    """Too few gated samples to estimate a batch scale."""


class EstimateFailed(DslamError):
    """Scale estimation produced a non-finite or non-positive value."""


class UnderconstrainedSystem(DslamError):
    """A normal system was requested for a window with no usable observations."""


class SolverFailure(DslamError):
    """The damped Schur complement was not positive definite."""


class GenerationError(DslamError):
    """Scene generation was asked for an empty or inconsistent world."""


class AssociationError(DslamError):
    """Trajectory association found no matching timestamp pairs."""


class TrajectoryParseError(DslamError):
    """A trajectory file line could not be parsed."""


class PipelineError(DslamError):
    """The pipeline could not continue processing frames."""
